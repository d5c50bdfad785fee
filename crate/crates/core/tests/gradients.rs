mod common;

use common::*;
use rand::Rng;
use tuplemax_core::losses::{pairwise_loss, softmax_loss, tuple_loss_exact, tuplemax_loss};
use tuplemax_core::model;
use tuplemax_core::{Label, LossKind, ModelConfig, ModelParameters, TupleSizePrior};

const LOSS_TOL: f64 = 1e-5;
const MODEL_TOL: f64 = 1e-4;

fn check_logit_gradient(
    name: &str,
    f: impl Fn(&tuplemax_core::Logits, Label) -> tuplemax_core::LossResult,
    cases: usize,
    seed: u64,
) {
    let mut r = rng(seed);
    for case in 0..cases {
        let n = [2, 3, 5, 10][case % 4];
        let z = random_logits(&mut r, n, 4.0);
        let y = Label(r.random_range(0..n));
        let analytic = f(&z, y).gradient;
        let numeric = central_differences(z.as_slice(), |p| {
            f(&tuplemax_core::Logits::new(p.to_vec()).unwrap(), y).value
        });
        let err = relative_error(&analytic, &numeric);
        assert!(
            err < LOSS_TOL,
            "{name}: case {case} (N={n}) relative error {err:e}"
        );
    }
}

#[test]
fn softmax_gradient_seed_42() {
    let mut r = rng(42);
    let z = random_logits(&mut r, 7, 3.0);
    let analytic = softmax_loss(&z, Label(2)).unwrap().gradient;
    let numeric = central_differences(z.as_slice(), |p| {
        softmax_loss(&tuplemax_core::Logits::new(p.to_vec()).unwrap(), Label(2))
            .unwrap()
            .value
    });
    assert!(relative_error(&analytic, &numeric) < LOSS_TOL);
}

#[test]
fn loss_gradients_match_finite_differences() {
    check_logit_gradient("softmax", |z, y| softmax_loss(z, y).unwrap(), 100, 1);
    check_logit_gradient("pairwise", |z, y| pairwise_loss(z, y).unwrap(), 100, 2);
    for n in 2..=3 {
        check_logit_gradient(
            "tuple",
            move |z, y| tuple_loss_exact(z, y, n.min(z.num_classes())).unwrap(),
            100,
            3 + n as u64,
        );
    }
    check_logit_gradient(
        "tuple n=N",
        |z, y| tuple_loss_exact(z, y, z.num_classes()).unwrap(),
        100,
        7,
    );
    check_logit_gradient(
        "tuplemax",
        |z, y| {
            let n = z.num_classes();
            let prior = if n == 2 {
                TupleSizePrior::pairwise()
            } else {
                TupleSizePrior::parse(&format!("2 0.7\n{n} 0.3")).unwrap()
            };
            tuplemax_loss(z, y, &prior, None).unwrap()
        },
        100,
        8,
    );
}

#[test]
fn tiny_model_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let mut r = rng(5);
    let frames = random_frames(&mut r, 6, 3);
    let params = params_with_active_relu(&cfg, &frames);
    let losses = [
        LossKind::Softmax,
        LossKind::Pairwise,
        LossKind::Tuplemax {
            prior: TupleSizePrior::parse("2 0.5\n3 0.5").unwrap(),
            sampling: None,
        },
    ];
    for loss in &losses {
        for (name, err) in model_gradient_errors(&params, &frames, Label(1), loss) {
            assert!(
                err < MODEL_TOL,
                "{}: {name} relative error {err:e}",
                loss.name()
            );
        }
    }
}

#[test]
fn stacked_model_gradients_match_finite_differences() {
    // Exercises inter-layer backprop and an unprojected top layer.
    let cfg = ModelConfig {
        input_dim: 2,
        max_seq_len: 64,
        layers: vec![
            tuplemax_core::RecurrentSpec::new(5, Some(3)),
            tuplemax_core::RecurrentSpec::new(3, None),
        ],
        num_classes: 4,
    };
    let mut r = rng(9);
    let frames = random_frames(&mut r, 9, 2);
    let params = params_with_active_relu(&cfg, &frames);
    for (name, err) in model_gradient_errors(&params, &frames, Label(3), &LossKind::Pairwise) {
        assert!(err < MODEL_TOL, "{name} relative error {err:e}");
    }
}

#[test]
fn head_bias_gradient_equals_upstream() {
    let cfg = ModelConfig::desk_default(4, 5);
    let params = ModelParameters::init(&cfg, 1).unwrap();
    let frames = random_frames(&mut rng(2), 20, 4);
    let trace = model::forward(&params, frames.view()).unwrap();
    let dz = softmax_loss(&trace.logits, Label(4)).unwrap().gradient;
    let g = model::backward(&trace, &params, &dz).unwrap();
    assert_eq!(g.head_bias.to_vec(), dz);
}
