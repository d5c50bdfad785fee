//! The tuplemax loss family over unnormalized logits.
//!
//! Every loss here returns its value together with the analytic gradient
//! with respect to the logits. Class indices are 0-based; a label `y` in
//! the usual 1-based notation `{1..N}` corresponds to `Label(y - 1)`.
//!
//! All log-sum-exp reductions subtract the maximum member before
//! exponentiating.

mod tuples;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use tuples::{
    binomial, enumerate_tuples, tuple_loss_exact, tuple_loss_sampled, tuplemax_loss,
    ENUMERATION_CAP,
};

/// Unnormalized per-class scores produced by a model's final linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::invalid(format!(
                "logits need at least 2 classes, got {}",
                scores.len()
            )));
        }
        if let Some(k) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!(
                "logit {k} is not finite ({})",
                scores[k]
            )));
        }
        Ok(Logits(scores))
    }

    /// Logits `ln p_k` for a probability vector, handy for fixtures.
    pub fn from_probabilities(probs: &[f64]) -> Result<Self> {
        Logits::new(probs.iter().map(|p| p.ln()).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Unrestricted argmax, ties toward the smallest index.
    pub fn argmax(&self) -> Label {
        let mut best = 0;
        for (k, &s) in self.0.iter().enumerate().skip(1) {
            if s > self.0[best] {
                best = k;
            }
        }
        Label(best)
    }
}

/// A 0-based class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Label(pub usize);

impl Label {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A sorted, duplicate-free candidate set of at least two class indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CandidateTuple(Vec<usize>);

impl CandidateTuple {
    pub fn new(mut members: Vec<usize>, num_classes: usize) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        if members.len() < 2 || members.len() > num_classes {
            return Err(Error::invalid(format!(
                "tuple size {} outside 2..={num_classes}",
                members.len()
            )));
        }
        if let Some(&m) = members.iter().find(|&&m| m >= num_classes) {
            return Err(Error::invalid(format!(
                "tuple member {m} out of range for {num_classes} classes"
            )));
        }
        Ok(CandidateTuple(members))
    }

    /// Caller guarantees the members are sorted, distinct and in range.
    pub(crate) fn from_sorted(members: Vec<usize>) -> Self {
        debug_assert!(members.windows(2).all(|w| w[0] < w[1]));
        CandidateTuple(members)
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.binary_search(&class).is_ok()
    }
}

/// Probabilities `p_n` over tuple sizes `n = 2..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleSizePrior {
    weights: BTreeMap<usize, f64>,
}

impl TupleSizePrior {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(weights: BTreeMap<usize, f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("tuple-size prior is empty"));
        }
        for (&n, &p) in &weights {
            if n < 2 {
                return Err(Error::invalid(format!("tuple size {n} is below 2")));
            }
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::invalid(format!(
                    "probability {p} for size {n} is not a nonnegative number"
                )));
            }
        }
        let total: f64 = weights.values().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::invalid(format!(
                "tuple-size probabilities sum to {total}, expected 1"
            )));
        }
        Ok(TupleSizePrior { weights })
    }

    /// All mass on pairs; the default prior.
    pub fn pairwise() -> Self {
        TupleSizePrior {
            weights: BTreeMap::from([(2, 1.0)]),
        }
    }

    /// All mass on one tuple size.
    pub fn single(size: usize) -> Result<Self> {
        TupleSizePrior::new(BTreeMap::from([(size, 1.0)]))
    }

    /// Checks every size against a concrete class count.
    pub fn validate_for(&self, num_classes: usize) -> Result<()> {
        match self.weights.keys().next_back() {
            Some(&n) if n > num_classes => Err(Error::invalid(format!(
                "prior has tuple size {n} but only {num_classes} classes"
            ))),
            _ => Ok(()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights.iter().map(|(&n, &p)| (n, p))
    }

    /// Parses `n probability` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || {
                Error::invalid(format!(
                    "prior line {}: expected `n probability`",
                    lineno + 1
                ))
            };
            let mut fields = line.split_whitespace();
            let n: usize = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let p: f64 = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if fields.next().is_some() {
                return Err(bad());
            }
            if weights.insert(n, p).is_some() {
                return Err(Error::invalid(format!("prior lists size {n} twice")));
            }
        }
        TupleSizePrior::new(weights)
    }
}

impl Default for TupleSizePrior {
    fn default() -> Self {
        TupleSizePrior::pairwise()
    }
}

/// Loss value with its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl LossResult {
    fn zeros(num_classes: usize) -> Self {
        LossResult {
            value: 0.0,
            gradient: vec![0.0; num_classes],
        }
    }

    fn add_scaled(&mut self, other: &LossResult, weight: f64) {
        self.value += weight * other.value;
        for (g, o) in self.gradient.iter_mut().zip(&other.gradient) {
            *g += weight * o;
        }
    }
}

/// Sample count and seed for the Monte Carlo tuple loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub num_samples: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn new(num_samples: usize, seed: u64) -> Result<Self> {
        if num_samples == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        Ok(SamplingConfig { num_samples, seed })
    }
}

/// Selects one member of the loss family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Softmax,
    Pairwise,
    Tuplemax {
        prior: TupleSizePrior,
        sampling: Option<SamplingConfig>,
    },
}

impl LossKind {
    pub fn evaluate(&self, z: &Logits, y: Label) -> Result<LossResult> {
        match self {
            LossKind::Softmax => softmax_loss(z, y),
            LossKind::Pairwise => pairwise_loss(z, y),
            LossKind::Tuplemax { prior, sampling } => tuplemax_loss(z, y, prior, *sampling),
        }
    }

    /// Same loss with the sampler (if any) reseeded; the training loop
    /// uses this to draw fresh tuples per example.
    pub fn reseeded(&self, seed: u64) -> LossKind {
        match self {
            LossKind::Tuplemax {
                prior,
                sampling: Some(cfg),
            } => LossKind::Tuplemax {
                prior: prior.clone(),
                sampling: Some(SamplingConfig { seed, ..*cfg }),
            },
            other => other.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::Pairwise => "pairwise",
            LossKind::Tuplemax { .. } => "tuplemax",
        }
    }
}

pub(crate) fn check_label(z: &Logits, y: Label) -> Result<()> {
    if y.0 >= z.num_classes() {
        return Err(Error::invalid(format!(
            "label {} out of range for {} classes",
            y.0,
            z.num_classes()
        )));
    }
    Ok(())
}

/// `log Σ exp(s_k)` over the selected entries.
pub(crate) fn log_sum_exp(scores: &[f64], members: impl Iterator<Item = usize> + Clone) -> f64 {
    let max = members
        .clone()
        .map(|k| scores[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = members.map(|k| (scores[k] - max).exp()).sum();
    max + sum.ln()
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy over all `N` classes: `log Σ_k exp(z_k) − z_y`.
pub fn softmax_loss(z: &Logits, y: Label) -> Result<LossResult> {
    check_label(z, y)?;
    let s = z.as_slice();
    let lse = log_sum_exp(s, 0..s.len());
    let mut gradient: Vec<f64> = s.iter().map(|&v| (v - lse).exp()).collect();
    gradient[y.0] -= 1.0;
    Ok(LossResult {
        value: lse - s[y.0],
        gradient,
    })
}

/// Mean two-class cross-entropy over every (y, k) pair with `k ≠ y`.
///
/// Each term is `log(e^{z_y} + e^{z_k}) − z_y = softplus(z_k − z_y)`, whose
/// derivative with respect to `z_k` is `σ(z_k − z_y)`.
pub fn pairwise_loss(z: &Logits, y: Label) -> Result<LossResult> {
    check_label(z, y)?;
    let s = z.as_slice();
    let others = (s.len() - 1) as f64;
    let mut result = LossResult::zeros(s.len());
    let mut pull = 0.0;
    for (k, &zk) in s.iter().enumerate() {
        if k == y.0 {
            continue;
        }
        let margin = zk - s[y.0];
        result.value += softplus(margin);
        let p = sigmoid(margin) / others;
        result.gradient[k] = p;
        pull += p;
    }
    result.value /= others;
    result.gradient[y.0] = -pull;
    Ok(result)
}
