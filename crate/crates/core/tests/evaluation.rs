mod common;

use common::{random_logits, rng};
use proptest::prelude::*;
use rand::Rng;
use tuplemax_core::evalharness::{
    average_pairwise_error, predict_among, ConfusionMatrix, PairList,
};
use tuplemax_core::{Label, Logits};

proptest! {
    #[test]
    fn restricted_prediction_survives_positive_affine_maps(
        raw in prop::collection::vec(-5.0f64..5.0, 2..10),
        scale in 0.1f64..10.0,
        offset in -20.0f64..20.0,
        mask in any::<u16>(),
    ) {
        let n = raw.len();
        let mut candidates: Vec<usize> = (0..n).filter(|k| mask & (1 << k) != 0).collect();
        if candidates.is_empty() {
            candidates.push(0);
        }
        let z = Logits::new(raw.clone()).unwrap();
        let mapped = Logits::new(raw.iter().map(|v| scale * v + offset).collect()).unwrap();
        prop_assert_eq!(predict_among(&z, &candidates).unwrap(), predict_among(&mapped, &candidates).unwrap());
    }

    #[test]
    fn full_candidate_set_is_plain_argmax(raw in prop::collection::vec(-5.0f64..5.0, 2..10)) {
        let z = Logits::new(raw).unwrap();
        let all: Vec<usize> = (0..z.num_classes()).collect();
        prop_assert_eq!(predict_among(&z, &all).unwrap(), z.argmax());
    }
}

fn random_eval_set(seed: u64, n: usize, count: usize) -> Vec<(Logits, Label)> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| (random_logits(&mut r, n, 3.0), Label(i % n)))
        .collect()
}

fn matrix(n: usize, set: &[(Logits, Label)]) -> ConfusionMatrix {
    ConfusionMatrix::from_logits(n, set.iter().map(|(z, y)| (z, *y))).unwrap()
}

#[test]
fn relabeling_classes_permutes_the_matrix() {
    let n = 5;
    let set = random_eval_set(1, n, 200);
    let perm = [3usize, 0, 4, 1, 2];
    let permuted: Vec<(Logits, Label)> = set
        .iter()
        .map(|(z, y)| {
            let mut v = vec![0.0; n];
            for (k, &s) in z.as_slice().iter().enumerate() {
                v[perm[k]] = s;
            }
            (Logits::new(v).unwrap(), Label(perm[y.0]))
        })
        .collect();
    let (a, b) = (matrix(n, &set), matrix(n, &permuted));
    for j in 0..n {
        for i in 0..n {
            assert_eq!(a.get(j, i), b.get(perm[j], perm[i]));
        }
    }
    assert_eq!(
        average_pairwise_error(&a, None).unwrap(),
        average_pairwise_error(&b, None).unwrap()
    );
}

#[test]
fn average_error_matches_brute_force() {
    let n = 4;
    let set = random_eval_set(2, n, 97);
    let mut errors = Vec::new();
    for j in 0..n {
        for i in (0..n).filter(|&i| i != j) {
            let rows: Vec<_> = set.iter().filter(|(_, y)| y.0 == j).collect();
            let wrong = rows
                .iter()
                .filter(|(z, _)| {
                    let s = z.as_slice();
                    s[i] > s[j] || (s[i] == s[j] && i < j)
                })
                .count();
            errors.push(100.0 * wrong as f64 / rows.len() as f64);
        }
    }
    let expected = errors.iter().sum::<f64>() / errors.len() as f64;
    let got = average_pairwise_error(&matrix(n, &set), None).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

    let pairs = PairList::new(vec![(0, 2, 1.0)]).unwrap();
    let top = average_pairwise_error(&matrix(n, &set), Some(&pairs)).unwrap();
    // Cells (0,2) and (2,0) sit at these positions of the row-major list.
    let both = (errors[1] + errors[2 * (n - 1)]) / 2.0;
    assert!((top - both).abs() < 1e-12, "{top} vs {both}");
}

#[test]
fn random_scores_give_chance_level_error() {
    let n = 6;
    let set = random_eval_set(3, n, 6000);
    let err = average_pairwise_error(&matrix(n, &set), None).unwrap();
    assert!((err - 50.0).abs() < 2.0, "{err}");
}

#[test]
fn class_independent_scores_put_every_error_on_one_side() {
    // The same logits for every example: class 0 always wins its pairs.
    let n = 3;
    let z = Logits::new(vec![2.0, 1.0, 0.0]).unwrap();
    let mut r = rng(4);
    let set: Vec<(Logits, Label)> = (0..30)
        .map(|_| (z.clone(), Label(r.random_range(0..n))))
        .collect();
    let m = matrix(n, &set);
    assert_eq!(m.get(0, 1), Some(100.0));
    assert_eq!(m.get(1, 0), Some(0.0));
    assert_eq!(m.get(2, 1), Some(0.0));
    assert_eq!(m.get(1, 2), Some(100.0));
}
