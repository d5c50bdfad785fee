//! Seeded synthetic corpora with controllable confusability.
//!
//! Classes are dealt round-robin into clusters. Cluster centres sit far
//! apart (`inter_cluster_sep`); each class mean is a short hop
//! (`intra_cluster_sep`) from its cluster centre, so classes sharing a
//! cluster are the hard pairs. Every frame is the class mean, plus a
//! class-specific drift growing linearly over the sequence, plus isotropic
//! Gaussian noise.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Label;
use crate::model::FeatureSequence;

const MAGIC: &str = "TMAXDATA";
const FORMAT: &str = "v1";

// Independent random streams so that e.g. resizing the eval split leaves
// the training data untouched.
const STREAM_GEOMETRY: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub num_clusters: usize,
    pub intra_cluster_sep: f64,
    pub inter_cluster_sep: f64,
    pub noise: f64,
    /// Norm of the per-class displacement accumulated from first to last frame.
    pub drift: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_classes: 6,
            input_dim: 8,
            num_clusters: 2,
            intra_cluster_sep: 1.0,
            inter_cluster_sep: 6.0,
            noise: 2.0,
            drift: 1.0,
            min_len: 16,
            max_len: 32,
            train_per_class: 300,
            eval_per_class: 50,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.input_dim == 0 {
            return fail("feature dimension must be positive".into());
        }
        if self.num_clusters == 0 || self.num_clusters > self.num_classes {
            return fail(format!(
                "cluster count {} outside 1..={}",
                self.num_clusters, self.num_classes
            ));
        }
        if !(self.intra_cluster_sep > 0.0 && self.inter_cluster_sep > 0.0) {
            return fail("cluster separations must be positive".into());
        }
        if self.inter_cluster_sep <= self.intra_cluster_sep {
            return fail("inter-cluster separation must exceed intra-cluster separation".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be a nonnegative number".into());
        }
        if !(self.drift >= 0.0 && self.drift.is_finite()) {
            return fail("drift must be a nonnegative number".into());
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return fail(format!(
                "length range {}..={} invalid (need 2 ≤ min ≤ max)",
                self.min_len, self.max_len
            ));
        }
        if self.train_per_class == 0 && self.eval_per_class == 0 {
            return fail("corpus would be empty".into());
        }
        Ok(())
    }

    /// Cluster index of a class.
    pub fn cluster_of(&self, class: usize) -> usize {
        class % self.num_clusters
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub num_classes: usize,
    pub input_dim: usize,
    pub examples: Vec<FeatureSequence>,
    /// Known for generated corpora; not stored in the binary format.
    pub split: Option<Split>,
    pub spec: Option<CorpusSpec>,
}

impl Corpus {
    pub fn new(
        num_classes: usize,
        input_dim: usize,
        examples: Vec<FeatureSequence>,
    ) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.label.0 >= num_classes {
                return Err(Error::invalid(format!(
                    "example {i} has label {} but corpus has {num_classes} classes",
                    ex.label
                )));
            }
            if ex.dim() != input_dim {
                return Err(Error::invalid(format!(
                    "example {i} has width {}, expected {input_dim}",
                    ex.dim()
                )));
            }
        }
        Ok(Corpus {
            num_classes,
            input_dim,
            examples,
            split: None,
            spec: None,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for ex in &self.examples {
            counts[ex.label.0] += 1;
        }
        counts
    }
}

/// Per-class generative parameters.
#[derive(Debug, Clone)]
pub struct ClassGeometry {
    pub means: Vec<Array1<f64>>,
    pub drifts: Vec<Array1<f64>>,
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Class means and drifts implied by `spec`.
pub fn class_geometry(spec: &CorpusSpec) -> Result<ClassGeometry> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(STREAM_GEOMETRY);
    let d = spec.input_dim;
    // Two independent random directions of norm r are ≈ r·√2 apart.
    let centers: Vec<_> = (0..spec.num_clusters)
        .map(|_| random_direction(&mut rng, d) * (spec.inter_cluster_sep / 2f64.sqrt()))
        .collect();
    let means = (0..spec.num_classes)
        .map(|k| {
            &centers[spec.cluster_of(k)] + &(random_direction(&mut rng, d) * spec.intra_cluster_sep)
        })
        .collect();
    let drifts = (0..spec.num_classes)
        .map(|_| random_direction(&mut rng, d) * spec.drift)
        .collect();
    Ok(ClassGeometry { means, drifts })
}

fn sample_split(
    spec: &CorpusSpec,
    geometry: &ClassGeometry,
    per_class: usize,
    stream: u64,
    split: Split,
) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let d = spec.input_dim;
    let mut examples = Vec::with_capacity(per_class * spec.num_classes);
    for _ in 0..per_class {
        for k in 0..spec.num_classes {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let mut frames = Array2::zeros((len, d));
            for (t, mut row) in frames.rows_mut().into_iter().enumerate() {
                let progress = t as f64 / (len - 1) as f64;
                for j in 0..d {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    row[j] = geometry.means[k][j]
                        + progress * geometry.drifts[k][j]
                        + spec.noise * noise;
                }
            }
            examples.push(FeatureSequence {
                frames,
                label: Label(k),
            });
        }
    }
    Corpus {
        num_classes: spec.num_classes,
        input_dim: d,
        examples,
        split: Some(split),
        spec: Some(spec.clone()),
    }
}

/// Draws the train and eval splits described by `spec`.
pub fn generate(spec: &CorpusSpec) -> Result<(Corpus, Corpus)> {
    let geometry = class_geometry(spec)?;
    let train = sample_split(
        spec,
        &geometry,
        spec.train_per_class,
        STREAM_TRAIN,
        Split::Train,
    );
    let eval = sample_split(
        spec,
        &geometry,
        spec.eval_per_class,
        STREAM_EVAL,
        Split::Eval,
    );
    Ok((train, eval))
}

/// Binary layout: the ASCII line `TMAXDATA v1 N d\n`, then per example a
/// `u32` label, a `u32` frame count `T` and `T·d` row-major `f64`s, all
/// little-endian.
pub fn write_corpus(corpus: &Corpus, mut w: impl Write) -> Result<()> {
    writeln!(
        w,
        "{MAGIC} {FORMAT} {} {}",
        corpus.num_classes, corpus.input_dim
    )?;
    for ex in &corpus.examples {
        let label = u32::try_from(ex.label.0).map_err(|_| Error::invalid("label too large"))?;
        let len = u32::try_from(ex.len()).map_err(|_| Error::invalid("sequence too long"))?;
        w.write_all(&label.to_le_bytes())?;
        w.write_all(&len.to_le_bytes())?;
        for v in ex.frames.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptData(msg.into())
}

/// Fills `buf`, returning `false` on a clean end of input before any byte.
fn read_record_field(r: &mut impl Read, buf: &mut [u8], at_boundary: bool) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 && at_boundary => return Ok(false),
            Ok(0) => return Err(corrupt("truncated record")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

pub fn read_corpus(r: impl Read) -> Result<Corpus> {
    let mut r = BufReader::new(r);
    let mut header = Vec::new();
    r.by_ref().take(256).read_until(b'\n', &mut header)?;
    if header.last() != Some(&b'\n') {
        return Err(corrupt("missing header line"));
    }
    let header = std::str::from_utf8(&header).map_err(|_| corrupt("header is not UTF-8"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (num_classes, dim) = match fields.as_slice() {
        [MAGIC, FORMAT, n, d] => (
            n.parse::<usize>().map_err(|_| corrupt("bad class count"))?,
            d.parse::<usize>()
                .map_err(|_| corrupt("bad feature dimension"))?,
        ),
        [MAGIC, v, ..] if *v != FORMAT => return Err(corrupt(format!("unsupported format {v}"))),
        _ => return Err(corrupt("malformed header")),
    };
    if num_classes < 2 || dim == 0 {
        return Err(corrupt("header declares an empty class or feature space"));
    }

    let mut examples = Vec::new();
    let mut word = [0u8; 4];
    let mut value = [0u8; 8];
    while read_record_field(&mut r, &mut word, true)? {
        let label = u32::from_le_bytes(word) as usize;
        if label >= num_classes {
            return Err(corrupt(format!(
                "record {} has label {label} but header declares {num_classes} classes",
                examples.len()
            )));
        }
        read_record_field(&mut r, &mut word, false)?;
        let len = u32::from_le_bytes(word) as usize;
        if len == 0 {
            return Err(corrupt(format!("record {} is empty", examples.len())));
        }
        let mut data = Vec::with_capacity(len * dim);
        for _ in 0..len * dim {
            read_record_field(&mut r, &mut value, false)?;
            data.push(f64::from_le_bytes(value));
        }
        let frames =
            Array2::from_shape_vec((len, dim), data).map_err(|e| corrupt(e.to_string()))?;
        examples.push(FeatureSequence {
            frames,
            label: Label(label),
        });
    }
    Ok(Corpus {
        num_classes,
        input_dim: dim,
        examples,
        split: None,
        spec: None,
    })
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_corpus(corpus, BufWriter::new(File::create(path)?))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    read_corpus(File::open(path)?)
}
