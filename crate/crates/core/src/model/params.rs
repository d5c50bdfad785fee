use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};

/// Weights of one LSTM layer. Gate rows are stacked in the order
/// input, forget, candidate, output; each block is `cell_size` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// `4c × input_size`
    pub input_weights: Array2<f64>,
    /// `4c × output_size`
    pub recurrent_weights: Array2<f64>,
    /// `4c`
    pub bias: Array1<f64>,
    /// `projection_size × c`, when the layer projects its output.
    pub projection: Option<Array2<f64>>,
}

impl LstmLayer {
    pub fn cell_size(&self) -> usize {
        self.bias.len() / 4
    }

    pub fn input_size(&self) -> usize {
        self.input_weights.ncols()
    }

    pub fn output_size(&self) -> usize {
        self.recurrent_weights.ncols()
    }
}

/// Every trainable array of a model.
///
/// The canonical order, used by [`tensors`](Self::tensors) and the
/// checkpoint format, is: for each recurrent layer bottom to top its input
/// weights, recurrent weights, biases and (if present) projection weights;
/// then the head weights and head biases. Every array is row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    config: ModelConfig,
    layers: Vec<LstmLayer>,
    /// `num_classes × embedding_size`
    pub head_weights: Array2<f64>,
    pub head_bias: Array1<f64>,
}

impl ModelParameters {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layers
            .iter()
            .zip(config.layer_inputs())
            .map(|(spec, input)| {
                let gates = 4 * spec.cell_size;
                LstmLayer {
                    input_weights: Array2::zeros((gates, input)),
                    recurrent_weights: Array2::zeros((gates, spec.output_size())),
                    bias: Array1::zeros(gates),
                    projection: spec
                        .projection_size
                        .map(|p| Array2::zeros((p, spec.cell_size))),
                }
            })
            .collect();
        Ok(ModelParameters {
            config: config.clone(),
            layers,
            head_weights: Array2::zeros((config.num_classes, config.embedding_size())),
            head_bias: Array1::zeros(config.num_classes),
        })
    }

    /// Uniform `±1/√fan_in` weights, zero biases except the forget gate
    /// which starts at 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |a: &mut Array2<f64>| {
            let bound = 1.0 / (a.ncols() as f64).sqrt();
            a.mapv_inplace(|_| rng.random_range(-bound..=bound));
        };
        for layer in &mut params.layers {
            fill(&mut layer.input_weights);
            fill(&mut layer.recurrent_weights);
            let c = layer.cell_size();
            layer.bias.slice_mut(ndarray::s![c..2 * c]).fill(1.0);
            if let Some(p) = layer.projection.as_mut() {
                fill(p);
            }
        }
        fill(&mut params.head_weights);
        Ok(params)
    }

    /// Rebuilds parameters from flat arrays in canonical order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Vec<f64>>) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut slots = params.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter arrays, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (i, (slot, values)) in slots.iter_mut().zip(&tensors).enumerate() {
            if slot.len() != values.len() {
                return Err(Error::invalid(format!(
                    "parameter array {i} has {} values, expected {}",
                    values.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(values);
        }
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LstmLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LstmLayer] {
        &mut self.layers
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    /// Flat views of every array in canonical order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.input_weights.as_slice().expect("standard layout"));
            out.push(l.recurrent_weights.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
            if let Some(p) = &l.projection {
                out.push(p.as_slice().expect("standard layout"));
            }
        }
        out.push(self.head_weights.as_slice().expect("standard layout"));
        out.push(self.head_bias.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.input_weights.as_slice_mut().expect("standard layout"));
            out.push(l.recurrent_weights.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
            if let Some(p) = &mut l.projection {
                out.push(p.as_slice_mut().expect("standard layout"));
            }
        }
        out.push(self.head_weights.as_slice_mut().expect("standard layout"));
        out.push(self.head_bias.as_slice_mut().expect("standard layout"));
        out
    }

    /// Names matching [`tensors`](Self::tensors), e.g. `layer1.recurrent_weights`.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for name in ["input_weights", "recurrent_weights", "bias"] {
                out.push(format!("layer{i}.{name}"));
            }
            if l.projection.is_some() {
                out.push(format!("layer{i}.projection"));
            }
        }
        out.push("head.weights".into());
        out.push("head.bias".into());
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += alpha * other`; both must share a config.
    pub fn add_scaled(&mut self, other: &ModelParameters, alpha: f64) {
        assert_eq!(self.config, other.config, "parameter layouts differ");
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}
