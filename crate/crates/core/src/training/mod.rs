//! Seed-deterministic mini-batch SGD with periodic checkpoints.

mod checkpoint;

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Corpus;
use crate::error::{Error, Result};
use crate::evalharness::{self, WindowConfig, WindowedModel};
use crate::losses::LossKind;
use crate::model::{self, FeatureSequence, ModelConfig, ModelParameters};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION,
};

const STREAM_BATCHES: u64 = 1;

/// Learning rate selected for softmax training on the default corpus.
pub const DEFAULT_SOFTMAX_LR: f64 = 0.3;
/// Learning rate selected for pairwise/tuplemax training on the default corpus.
pub const DEFAULT_TUPLEMAX_LR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Global-norm gradient clipping threshold.
    pub clip_norm: f64,
    /// Windowing used when evaluating each checkpoint; `None` scores each
    /// sequence in one pass.
    pub eval_window: Option<WindowConfig>,
}

impl TrainConfig {
    pub const DEFAULT_CLIP_NORM: f64 = 5.0;

    pub fn new(loss: LossKind, learning_rate: f64, total_steps: usize, seed: u64) -> Self {
        TrainConfig {
            loss,
            learning_rate,
            batch_size: 16,
            total_steps,
            checkpoint_every: 100,
            seed,
            clip_norm: Self::DEFAULT_CLIP_NORM,
            eval_window: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid(format!(
                "learning rate {} must be a nonnegative number",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.checkpoint_every == 0 {
            return Err(Error::invalid(
                "batch size, step count and checkpoint interval must be positive",
            ));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::invalid("clip norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub params: ModelParameters,
    /// Mean per-example training loss over the steps since the previous checkpoint.
    pub train_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub pairwise_error_pct: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub curve: Vec<CurvePoint>,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints
            .last()
            .expect("training emits at least one checkpoint")
    }

    pub fn errors(&self) -> Vec<f64> {
        self.curve.iter().map(|p| p.pairwise_error_pct).collect()
    }
}

/// Epoch-wise shuffled batches: every example is drawn once per epoch.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_BATCHES);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchSampler {
            order,
            cursor: 0,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize, out: &mut Vec<usize>) {
        out.clear();
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
    }
}

/// SplitMix64 finalizer; decorrelates per-example sampling seeds.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn check_corpus(corpus: &Corpus, model_cfg: &ModelConfig, what: &str) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::invalid(format!("{what} corpus is empty")));
    }
    if corpus.input_dim != model_cfg.input_dim {
        return Err(Error::invalid(format!(
            "{what} corpus has width {}, model expects {}",
            corpus.input_dim, model_cfg.input_dim
        )));
    }
    if let Some(ex) = corpus
        .examples
        .iter()
        .find(|e| e.label.0 >= model_cfg.num_classes)
    {
        return Err(Error::invalid(format!(
            "{what} corpus has label {} but model has {} classes",
            ex.label, model_cfg.num_classes
        )));
    }
    Ok(())
}

/// Accumulates the summed gradient of `loss` over `examples` into `grads`
/// and returns the summed loss value.
pub fn accumulate_batch<'a>(
    params: &ModelParameters,
    loss: &LossKind,
    examples: impl IntoIterator<Item = (&'a FeatureSequence, u64)>,
    grads: &mut ModelParameters,
) -> Result<f64> {
    let mut total = 0.0;
    for (ex, sample_seed) in examples {
        let trace = model::forward(params, ex.frames.view())?;
        let result = loss
            .reseeded(sample_seed)
            .evaluate(&trace.logits, ex.label)?;
        model::backward_accumulate(&trace, params, &result.gradient, grads)?;
        total += result.value;
    }
    Ok(total)
}

/// Mean loss of `params` over a set of examples.
pub fn mean_loss(
    params: &ModelParameters,
    loss: &LossKind,
    examples: &[FeatureSequence],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples"));
    }
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let z = model::forward(params, ex.frames.view())?.logits;
        total += loss.reseeded(i as u64).evaluate(&z, ex.label)?.value;
    }
    Ok(total / examples.len() as f64)
}

/// All-pairs average pairwise error (percent) of `params` on `examples`.
pub fn pairwise_error(
    params: &ModelParameters,
    examples: &[FeatureSequence],
    window: Option<WindowConfig>,
) -> Result<f64> {
    let window = window.unwrap_or(WindowConfig::whole(params.config().max_seq_len));
    let scorer = WindowedModel { params, window };
    let m = evalharness::confusion_matrix(&scorer, examples)?;
    evalharness::average_pairwise_error(&m, None)
}

/// Trains a freshly initialized model.
///
/// Parameters are initialized from `config.seed`, so runs that differ only
/// in their loss start from the same weights and see the same batches.
/// Each checkpoint's pairwise error is measured on `eval` when given,
/// otherwise on the training set.
pub fn train(
    config: &TrainConfig,
    model_cfg: &ModelConfig,
    train_set: &Corpus,
    eval: Option<&Corpus>,
) -> Result<TrainOutcome> {
    let params = ModelParameters::init(model_cfg, config.seed)?;
    train_from(config, params, train_set, eval)
}

/// [`train`] starting from given parameters.
pub fn train_from(
    config: &TrainConfig,
    mut params: ModelParameters,
    train_set: &Corpus,
    eval: Option<&Corpus>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model_cfg = params.config().clone();
    check_corpus(train_set, &model_cfg, "training")?;
    if let Some(e) = eval {
        check_corpus(e, &model_cfg, "evaluation")?;
    }
    if let LossKind::Tuplemax { prior, .. } = &config.loss {
        prior.validate_for(model_cfg.num_classes)?;
    }
    let eval_examples = &eval.unwrap_or(train_set).examples;

    let mut sampler = BatchSampler::new(train_set.len(), config.seed);
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut grads = params.zeros_like();
    let mut checkpoints = Vec::new();
    let mut curve = Vec::new();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    for step in 1..=config.total_steps {
        sampler.next_batch(config.batch_size, &mut batch);
        grads.scale(0.0);
        let items = batch.iter().enumerate().map(|(slot, &idx)| {
            let seed = mix(config.seed ^ mix((step as u64) << 20 | slot as u64));
            (&train_set.examples[idx], seed)
        });
        loss_sum += accumulate_batch(&params, &config.loss, items, &mut grads)?;
        loss_count += batch.len();

        grads.scale(1.0 / batch.len() as f64);
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite gradient at step {step}"
            )));
        }
        if norm > config.clip_norm {
            grads.scale(config.clip_norm / norm);
        }
        params.add_scaled(&grads, -config.learning_rate);

        if step % config.checkpoint_every == 0 || step == config.total_steps {
            let train_loss = loss_sum / loss_count as f64;
            let err = pairwise_error(&params, eval_examples, config.eval_window)?;
            curve.push(CurvePoint {
                step,
                train_loss,
                pairwise_error_pct: err,
            });
            checkpoints.push(Checkpoint {
                step,
                params: params.clone(),
                train_loss,
            });
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    Ok(TrainOutcome { checkpoints, curve })
}

pub const CURVE_HEADER: &str = "step,train_loss,pairwise_error_pct";

pub fn write_curve_csv(curve: &[CurvePoint], mut w: impl Write) -> Result<()> {
    writeln!(w, "{CURVE_HEADER}")?;
    for p in curve {
        writeln!(
            w,
            "{},{:.6},{:.6}",
            p.step, p.train_loss, p.pairwise_error_pct
        )?;
    }
    Ok(())
}

pub fn parse_curve_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CURVE_HEADER) {
        return Err(Error::CorruptData(format!(
            "curve CSV must start with `{CURVE_HEADER}`"
        )));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::CorruptData(format!("curve CSV row {}: `{line}`", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            let [step, loss, err] = f.as_slice() else {
                return Err(bad());
            };
            Ok(CurvePoint {
                step: step.trim().parse().map_err(|_| bad())?,
                train_loss: loss.trim().parse().map_err(|_| bad())?,
                pairwise_error_pct: err.trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// The three checkpoint-selection strategies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointReport {
    pub last: f64,
    pub average: f64,
    /// Minimum over checkpoints, picked using the evaluation data itself,
    /// so it is an optimistic figure.
    pub best_on_test: f64,
}

pub fn checkpoint_report(errors: &[f64]) -> Result<CheckpointReport> {
    let Some(&last) = errors.last() else {
        return Err(Error::invalid("no checkpoint errors to report"));
    };
    Ok(CheckpointReport {
        last,
        average: errors.iter().sum::<f64>() / errors.len() as f64,
        best_on_test: errors.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

impl fmt::Display for CheckpointReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "last,{:.6}", self.last)?;
        writeln!(f, "average,{:.6}", self.average)?;
        writeln!(f, "best_on_test,{:.6}", self.best_on_test)?;
        write!(
            f,
            "# best_on_test selects on evaluation data and is optimistic"
        )
    }
}
