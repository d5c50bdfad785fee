//! A projected-LSTM sequence classifier with hand-written forward and
//! backward passes.
//!
//! Pipeline: truncate to `max_seq_len` frames, concatenate neighbouring
//! frame pairs (halving length, doubling width), run a stack of LSTM layers
//! with optional output projections, take the last timestep of the top
//! layer, apply ReLU and a linear head producing one logit per class.

mod lstm;
mod params;

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Label, Logits};

pub use lstm::LayerTrace;
pub use params::{LstmLayer, ModelParameters};

/// One utterance-like example: `T × d` frames and its class.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Array2<f64>,
    pub label: Label,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentSpec {
    pub cell_size: usize,
    pub projection_size: Option<usize>,
}

impl RecurrentSpec {
    pub fn new(cell_size: usize, projection_size: Option<usize>) -> Self {
        RecurrentSpec {
            cell_size,
            projection_size,
        }
    }

    /// Width of what the layer emits, which is also what it feeds back.
    pub fn output_size(&self) -> usize {
        self.projection_size.unwrap_or(self.cell_size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub max_seq_len: usize,
    pub layers: Vec<RecurrentSpec>,
    pub num_classes: usize,
}

impl ModelConfig {
    pub const DEFAULT_MAX_SEQ_LEN: usize = 64;

    /// Pyramid of shrinking recurrent layers: (32, 16), (24, 16), (16, none).
    pub fn desk_default(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            max_seq_len: Self::DEFAULT_MAX_SEQ_LEN,
            layers: vec![
                RecurrentSpec::new(32, Some(16)),
                RecurrentSpec::new(24, Some(16)),
                RecurrentSpec::new(16, None),
            ],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::invalid("max_seq_len must be at least 2"));
        }
        if self.layers.is_empty() {
            return Err(Error::invalid("need at least one recurrent layer"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.cell_size == 0 {
                return Err(Error::invalid(format!("layer {i} has no cells")));
            }
            if let Some(p) = l.projection_size {
                if p == 0 || p >= l.cell_size {
                    return Err(Error::invalid(format!(
                        "layer {i}: projection {p} must be in 1..{}",
                        l.cell_size
                    )));
                }
            }
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        Ok(())
    }

    /// Input width of each recurrent layer.
    pub(crate) fn layer_inputs(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.layers.len());
        let mut width = 2 * self.input_dim;
        for l in &self.layers {
            dims.push(width);
            width = l.output_size();
        }
        dims
    }

    pub(crate) fn embedding_size(&self) -> usize {
        self.layers.last().map_or(0, RecurrentSpec::output_size)
    }
}

/// Stacks frames `2t` and `2t + 1` into output row `t`; an odd trailing
/// frame is dropped.
pub fn concat_subsample(frames: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (len, dim) = frames.dim();
    if len < 2 {
        return Err(Error::SequenceTooShort { len, min: 2 });
    }
    let half = len / 2;
    frames
        .slice(s![..2 * half, ..])
        .to_owned()
        .into_shape_with_order((half, 2 * dim))
        .map_err(|e| Error::invalid(e.to_string()))
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Top-layer output at the last timestep, before ReLU.
    pub pooled: Array1<f64>,
    pub logits: Logits,
}

impl ForwardTrace {
    /// Timesteps after subsampling.
    pub fn steps(&self) -> usize {
        self.layers.first().map_or(0, |l| l.steps())
    }
}

pub fn forward(params: &ModelParameters, frames: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
    let cfg = params.config();
    if frames.ncols() != cfg.input_dim {
        return Err(Error::invalid(format!(
            "frame width {} does not match model input {}",
            frames.ncols(),
            cfg.input_dim
        )));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("frames contain non-finite values"));
    }
    let kept = frames.nrows().min(cfg.max_seq_len);
    let mut input = concat_subsample(frames.slice(s![..kept, ..]))?;
    let mut layers = Vec::with_capacity(params.layers().len());
    for layer in params.layers() {
        let trace = lstm::forward_layer(layer, input);
        input = trace.outputs.clone();
        layers.push(trace);
    }
    let top = layers.last().expect("config has at least one layer");
    let pooled = top.outputs.row(top.steps() - 1).to_owned();
    let activated = pooled.mapv(|v| v.max(0.0));
    let scores = params.head_weights.dot(&activated) + &params.head_bias;
    let logits = Logits::new(scores.to_vec())?;
    Ok(ForwardTrace {
        layers,
        pooled,
        logits,
    })
}

/// Gradients of a scalar loss with respect to every parameter, given
/// `dL/dz`. The result has the same layout as `params`.
pub fn backward(
    trace: &ForwardTrace,
    params: &ModelParameters,
    dl_dz: &[f64],
) -> Result<ModelParameters> {
    let mut grads = params.zeros_like();
    backward_accumulate(trace, params, dl_dz, &mut grads)?;
    Ok(grads)
}

/// [`backward`] that adds into an existing gradient buffer.
pub fn backward_accumulate(
    trace: &ForwardTrace,
    params: &ModelParameters,
    dl_dz: &[f64],
    grads: &mut ModelParameters,
) -> Result<()> {
    let cfg = params.config();
    if dl_dz.len() != cfg.num_classes {
        return Err(Error::invalid(format!(
            "loss gradient has {} entries, model has {} classes",
            dl_dz.len(),
            cfg.num_classes
        )));
    }
    if grads.config() != cfg {
        return Err(Error::invalid("gradient buffer has a different layout"));
    }
    if trace.layers.len() != params.layers().len()
        || trace.pooled.len() != cfg.embedding_size()
        || trace.logits.num_classes() != cfg.num_classes
        || trace
            .layers
            .iter()
            .zip(params.layers())
            .any(|(t, l)| !t.matches(l))
    {
        return Err(Error::invalid("trace was not produced by these parameters"));
    }

    let dz = Array1::from(dl_dz.to_vec());
    let activated = trace.pooled.mapv(|v| v.max(0.0));
    for (mut row, &d) in grads.head_weights.rows_mut().into_iter().zip(dz.iter()) {
        row.scaled_add(d, &activated);
    }
    grads.head_bias += &dz;

    let d_act = params.head_weights.t().dot(&dz);
    let d_pooled = ndarray::Zip::from(&d_act)
        .and(&trace.pooled)
        .map_collect(|&g, &p| if p > 0.0 { g } else { 0.0 });

    let steps = trace.steps();
    let mut d_out = Array2::zeros((steps, cfg.embedding_size()));
    d_out.row_mut(steps - 1).assign(&d_pooled);
    for ((layer, layer_trace), layer_grad) in params
        .layers()
        .iter()
        .zip(&trace.layers)
        .zip(grads.layers_mut())
        .rev()
    {
        d_out = lstm::backward_layer(layer, layer_trace, &d_out, layer_grad);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            max_seq_len: 64,
            layers: vec![RecurrentSpec::new(4, Some(2))],
            num_classes: 3,
        }
    }

    #[test]
    fn concat_pairs_rows() {
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        let y = concat_subsample(x.view()).unwrap();
        assert_eq!(y, array![[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]]);
    }

    #[test]
    fn concat_shapes() {
        let x = Array2::<f64>::zeros((400, 40));
        assert_eq!(concat_subsample(x.view()).unwrap().dim(), (200, 80));
        let x = Array2::<f64>::zeros((5, 3));
        assert_eq!(concat_subsample(x.view()).unwrap().dim(), (2, 6));
        let x = Array2::<f64>::zeros((1, 3));
        assert!(matches!(
            concat_subsample(x.view()),
            Err(Error::SequenceTooShort { len: 1, min: 2 })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk_default(8, 6).validate().is_ok());
        let mut c = tiny_config();
        c.layers[0].projection_size = Some(4);
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.layers.clear();
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.num_classes = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = ModelConfig {
            input_dim: 4,
            ..tiny_config()
        };
        let params = ModelParameters::init(&cfg, 3).unwrap();
        let x = Array2::from_shape_fn((2, 4), |(t, j)| (t + j) as f64 * 0.1);
        let trace = forward(&params, x.view()).unwrap();
        assert_eq!(trace.logits.num_classes(), 3);
        assert_eq!(trace.steps(), 1);
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let params = ModelParameters::zeros(&ModelConfig::desk_default(8, 6)).unwrap();
        let x = Array2::from_elem((10, 8), 0.7);
        let trace = forward(&params, x.view()).unwrap();
        assert!(trace.logits.as_slice().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig::desk_default(8, 6);
        let x = Array2::from_shape_fn((13, 8), |(t, j)| ((t * 7 + j) as f64).sin());
        let a = forward(&ModelParameters::init(&cfg, 11).unwrap(), x.view()).unwrap();
        let b = forward(&ModelParameters::init(&cfg, 11).unwrap(), x.view()).unwrap();
        let bits = |l: &Logits| l.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.logits), bits(&b.logits));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let params = ModelParameters::init(&tiny_config(), 0).unwrap();
        let x = Array2::<f64>::zeros((6, 4));
        assert!(matches!(
            forward(&params, x.view()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let params = ModelParameters::init(&tiny_config(), 1).unwrap();
        let x = Array2::from_shape_fn((6, 3), |(t, j)| (t as f64 - j as f64) * 0.3);
        let trace = forward(&params, x.view()).unwrap();
        let g = backward(&trace, &params, &[0.0; 3]).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn head_bias_gradient_is_upstream() {
        let params = ModelParameters::init(&tiny_config(), 1).unwrap();
        let x = Array2::from_shape_fn((6, 3), |(t, j)| (t * j) as f64 * 0.2);
        let trace = forward(&params, x.view()).unwrap();
        let dz = [0.25, -0.5, 0.125];
        let g = backward(&trace, &params, &dz).unwrap();
        assert_eq!(g.head_bias.to_vec(), dz.to_vec());
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let a = ModelParameters::init(&tiny_config(), 1).unwrap();
        let b = ModelParameters::init(&ModelConfig::desk_default(3, 3), 1).unwrap();
        let x = Array2::<f64>::zeros((6, 3));
        let trace = forward(&a, x.view()).unwrap();
        assert!(backward(&trace, &b, &[0.0; 3]).is_err());
        assert!(backward(&trace, &a, &[0.0; 2]).is_err());
    }

    #[test]
    fn truncation_ignores_late_frames() {
        let cfg = ModelConfig {
            max_seq_len: 8,
            ..ModelConfig::desk_default(3, 4)
        };
        let params = ModelParameters::init(&cfg, 2).unwrap();
        let mut x = Array2::from_shape_fn((12, 3), |(t, j)| ((t + 2 * j) as f64).cos());
        let before = forward(&params, x.view()).unwrap().logits;
        x.slice_mut(s![8.., ..]).fill(9.0);
        let after = forward(&params, x.view()).unwrap().logits;
        assert_eq!(before, after);
        x[[7, 0]] += 1.0;
        assert_ne!(forward(&params, x.view()).unwrap().logits, before);
    }

    #[test]
    fn appending_frames_changes_logits() {
        let cfg = ModelConfig::desk_default(3, 4);
        let params = ModelParameters::init(&cfg, 2).unwrap();
        let x = Array2::from_shape_fn((8, 3), |(t, j)| ((t + j) as f64).sin());
        let longer = Array2::from_shape_fn((10, 3), |(t, j)| ((t + j) as f64).sin());
        assert_ne!(
            forward(&params, x.view()).unwrap().logits,
            forward(&params, longer.view()).unwrap().logits
        );
    }
}
