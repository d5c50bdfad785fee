//! Size-`n` tuple losses: exact enumeration, a sampled estimator, and the
//! prior-weighted mixture over tuple sizes.

use itertools::Itertools;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    check_label, log_sum_exp, CandidateTuple, Label, Logits, LossResult, SamplingConfig,
    TupleSizePrior,
};
use crate::error::{Error, Result};

/// Largest tuple count the exact loss will enumerate.
pub const ENUMERATION_CAP: u128 = 10_000;

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

fn check_size(num_classes: usize, n: usize) -> Result<()> {
    if n < 2 || n > num_classes {
        return Err(Error::invalid(format!(
            "tuple size {n} outside 2..={num_classes}"
        )));
    }
    Ok(())
}

fn check_feasible(num_classes: usize, n: usize) -> Result<u128> {
    let count = binomial(num_classes - 1, n - 1);
    if count > ENUMERATION_CAP {
        return Err(Error::EnumerationInfeasible {
            count,
            cap: ENUMERATION_CAP,
        });
    }
    Ok(count)
}

/// Every class except `y`, ascending.
fn distractors(num_classes: usize, y: usize) -> impl Iterator<Item = usize> + Clone {
    (0..num_classes).filter(move |&k| k != y)
}

/// Inserts `y` into an ascending distractor list.
fn with_label(mut members: Vec<usize>, y: usize) -> Vec<usize> {
    let at = members.partition_point(|&k| k < y);
    members.insert(at, y);
    members
}

/// All size-`n` tuples containing `y`, in lexicographic order of members.
pub fn enumerate_tuples(num_classes: usize, y: Label, n: usize) -> Result<Vec<CandidateTuple>> {
    if y.0 >= num_classes {
        return Err(Error::invalid(format!(
            "label {} out of range for {num_classes} classes",
            y.0
        )));
    }
    check_size(num_classes, n)?;
    check_feasible(num_classes, n)?;
    Ok(distractors(num_classes, y.0)
        .combinations(n - 1)
        .map(|d| CandidateTuple::from_sorted(with_label(d, y.0)))
        .collect())
}

/// Adds `log Σ_{k∈S} exp(z_k)` to the value and the restricted softmax over
/// `S` to the gradient. The `− z_y` part is applied once by the caller.
fn accumulate_tuple(scores: &[f64], members: &[usize], acc: &mut LossResult) {
    let lse = log_sum_exp(scores, members.iter().copied());
    acc.value += lse;
    for &k in members {
        acc.gradient[k] += (scores[k] - lse).exp();
    }
}

/// Turns a sum over `count` tuples into the mean tuple loss.
fn finish(mut acc: LossResult, count: usize, scores: &[f64], y: usize) -> LossResult {
    let inv = 1.0 / count as f64;
    acc.value = acc.value * inv - scores[y];
    for g in acc.gradient.iter_mut() {
        *g *= inv;
    }
    acc.gradient[y] -= 1.0;
    // Restricted softmax always gives y some mass, so the value is ≥ 0 up to rounding.
    acc.value = acc.value.max(0.0);
    acc
}

/// Mean restricted cross-entropy over every size-`n` tuple containing `y`.
pub fn tuple_loss_exact(z: &Logits, y: Label, n: usize) -> Result<LossResult> {
    check_label(z, y)?;
    let num_classes = z.num_classes();
    check_size(num_classes, n)?;
    check_feasible(num_classes, n)?;
    let scores = z.as_slice();
    let mut acc = LossResult::zeros(num_classes);
    let mut count = 0;
    for d in distractors(num_classes, y.0).combinations(n - 1) {
        accumulate_tuple(scores, &with_label(d, y.0), &mut acc);
        count += 1;
    }
    Ok(finish(acc, count, scores, y.0))
}

/// Unbiased Monte Carlo estimate of [`tuple_loss_exact`].
///
/// Each of the `num_samples` tuples is `y` plus `n − 1` distinct distractors
/// drawn uniformly; tuples are drawn independently of each other.
pub fn tuple_loss_sampled(
    z: &Logits,
    y: Label,
    n: usize,
    cfg: SamplingConfig,
) -> Result<LossResult> {
    check_label(z, y)?;
    let num_classes = z.num_classes();
    check_size(num_classes, n)?;
    if cfg.num_samples == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if n == num_classes {
        // One possible tuple; no sampling noise to average.
        return tuple_loss_exact(z, y, n);
    }
    let scores = z.as_slice();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut acc = LossResult::zeros(num_classes);
    let mut members = Vec::with_capacity(n);
    for _ in 0..cfg.num_samples {
        members.clear();
        members.extend(
            rand::seq::index::sample(&mut rng, num_classes - 1, n - 1)
                .into_iter()
                .map(|i| if i >= y.0 { i + 1 } else { i }),
        );
        members.push(y.0);
        members.sort_unstable();
        accumulate_tuple(scores, &members, &mut acc);
    }
    Ok(finish(acc, cfg.num_samples, scores, y.0))
}

/// `Σ_n p_n · L^n(y, z)` over the sizes the prior supports.
///
/// Each size is enumerated when its tuple count is within
/// [`ENUMERATION_CAP`]; otherwise it is sampled with `sampling`, or the call
/// fails when no sampler is given.
pub fn tuplemax_loss(
    z: &Logits,
    y: Label,
    prior: &TupleSizePrior,
    sampling: Option<SamplingConfig>,
) -> Result<LossResult> {
    check_label(z, y)?;
    let num_classes = z.num_classes();
    prior.validate_for(num_classes)?;
    let mut total = LossResult::zeros(num_classes);
    for (n, p) in prior.iter() {
        if p == 0.0 {
            continue;
        }
        let term = if binomial(num_classes - 1, n - 1) <= ENUMERATION_CAP {
            tuple_loss_exact(z, y, n)?
        } else if let Some(cfg) = sampling {
            let seed = cfg.seed.wrapping_add(n as u64);
            tuple_loss_sampled(z, y, n, SamplingConfig { seed, ..cfg })?
        } else {
            return Err(Error::EnumerationInfeasible {
                count: binomial(num_classes - 1, n - 1),
                cap: ENUMERATION_CAP,
            });
        };
        total.add_scaled(&term, p);
    }
    Ok(total)
}
