#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tuplemax_core::model::{self, RecurrentSpec};
use tuplemax_core::{Label, Logits, LossKind, ModelConfig, ModelParameters};

pub const FD_STEP: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; falls back to the absolute difference when
/// both vectors are essentially zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central differences of `f` at `x`.
pub fn central_differences(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn random_logits(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Logits {
    Logits::new((0..n).map(|_| rng.random_range(-spread..spread)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// d = 3, one layer with 4 cells projected to 2, 3 classes.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        max_seq_len: 64,
        layers: vec![RecurrentSpec::new(4, Some(2))],
        num_classes: 3,
    }
}

pub fn random_frames(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |_| rng.random_range(-1.0..1.0))
}

/// Per-array relative error between backprop and finite differences of
/// `loss ∘ forward` over every parameter.
pub fn model_gradient_errors(
    params: &ModelParameters,
    frames: &Array2<f64>,
    label: Label,
    loss: &LossKind,
) -> Vec<(String, f64)> {
    let trace = model::forward(params, frames.view()).unwrap();
    let dz = loss.evaluate(&trace.logits, label).unwrap().gradient;
    let analytic = model::backward(&trace, params, &dz).unwrap();

    let names = params.tensor_names();
    let flat: Vec<Vec<f64>> = params.tensors().iter().map(|t| t.to_vec()).collect();
    let mut out = Vec::new();
    for (idx, name) in names.into_iter().enumerate() {
        let numeric = central_differences(&flat[idx], |probe| {
            let mut tensors = flat.clone();
            tensors[idx] = probe.to_vec();
            let p = ModelParameters::from_tensors(params.config(), tensors).unwrap();
            let z = model::forward(&p, frames.view()).unwrap().logits;
            loss.evaluate(&z, label).unwrap().value
        });
        let a = analytic.tensors()[idx];
        assert!(
            a.iter().any(|&v| v != 0.0),
            "{name}: analytic gradient is identically zero, check would be vacuous"
        );
        out.push((name, relative_error(a, &numeric)));
    }
    out
}

/// First parameter seed whose pooled embedding is strictly positive on
/// `frames`, so that every parameter receives gradient through the ReLU.
pub fn params_with_active_relu(cfg: &ModelConfig, frames: &Array2<f64>) -> ModelParameters {
    (0..1000u64)
        .map(|seed| ModelParameters::init(cfg, seed).unwrap())
        .find(|p| {
            let trace = model::forward(p, frames.view()).unwrap();
            trace.pooled.iter().all(|&v| v > 1e-3)
        })
        .expect("some seed activates every ReLU unit")
}
