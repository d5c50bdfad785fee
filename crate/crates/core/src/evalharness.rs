//! Restricted-candidate inference and pairwise evaluation.
//!
//! A confusion cell `E[j][i]` is the accuracy (percent) on examples whose
//! truth is `j` when the decision is restricted to `{j, i}`. The diagonal
//! is 0 by convention.

use std::io::Write;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::losses::{CandidateTuple, Label, Logits};
use crate::model::{self, FeatureSequence, ModelParameters};

/// Argmax of `z` over the tuple members, ties toward the smallest index.
pub fn predict_restricted(z: &Logits, candidates: &CandidateTuple) -> Result<Label> {
    predict_among(z, candidates.members())
}

/// Like [`predict_restricted`] over an arbitrary list of class indices.
pub fn predict_among(z: &Logits, candidates: &[usize]) -> Result<Label> {
    let scores = z.as_slice();
    let mut best: Option<usize> = None;
    for &k in candidates {
        if k >= scores.len() {
            return Err(Error::invalid(format!(
                "candidate {k} out of range for {} classes",
                scores.len()
            )));
        }
        best = match best {
            Some(b) if scores[b] > scores[k] || (scores[b] == scores[k] && b < k) => Some(b),
            _ => Some(k),
        };
    }
    best.map(Label)
        .ok_or_else(|| Error::invalid("empty candidate set"))
}

/// Fixed-length analysis windows over a long sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WindowConfig {
    pub length: usize,
    pub hop: usize,
}

impl WindowConfig {
    pub fn new(length: usize, hop: usize) -> Result<Self> {
        if length == 0 || hop == 0 || hop > length {
            return Err(Error::invalid(format!(
                "window {length} / hop {hop} invalid (need 1 ≤ hop ≤ length)"
            )));
        }
        Ok(WindowConfig { length, hop })
    }

    /// One window as long as the model's truncation limit.
    pub fn whole(max_len: usize) -> Self {
        WindowConfig {
            length: max_len,
            hop: max_len,
        }
    }

    /// Start frames of the windows covering `len` frames. Windows start at
    /// multiples of the hop; the last one is pulled back to end exactly at
    /// `len` instead of running past it.
    pub fn starts(&self, len: usize) -> Vec<usize> {
        if len <= self.length {
            return vec![0];
        }
        let mut starts = Vec::new();
        let mut s = 0;
        while s + self.length < len {
            starts.push(s);
            s += self.hop;
        }
        starts.push(len - self.length);
        starts
    }
}

/// Mean of the model's logits over every window of `frames`.
pub fn sliding_window_logits(
    params: &ModelParameters,
    frames: ArrayView2<'_, f64>,
    cfg: WindowConfig,
) -> Result<Logits> {
    let len = frames.nrows();
    if len == 0 {
        return Err(Error::invalid("empty sequence"));
    }
    let starts = cfg.starts(len);
    let mut sum = vec![0.0; params.config().num_classes];
    for &s in &starts {
        let end = (s + cfg.length).min(len);
        let z = model::forward(params, frames.slice(ndarray::s![s..end, ..]))?.logits;
        for (acc, v) in sum.iter_mut().zip(z.as_slice()) {
            *acc += v;
        }
    }
    let count = starts.len() as f64;
    Logits::new(sum.into_iter().map(|v| v / count).collect())
}

/// Anything that maps a frame sequence to logits.
pub trait Scorer {
    fn num_classes(&self) -> usize;
    fn score(&self, frames: ArrayView2<'_, f64>) -> Result<Logits>;
}

/// A trained model evaluated with sliding-window averaging.
#[derive(Debug, Clone, Copy)]
pub struct WindowedModel<'a> {
    pub params: &'a ModelParameters,
    pub window: WindowConfig,
}

impl Scorer for WindowedModel<'_> {
    fn num_classes(&self) -> usize {
        self.params.config().num_classes
    }

    fn score(&self, frames: ArrayView2<'_, f64>) -> Result<Logits> {
        sliding_window_logits(self.params, frames, self.window)
    }
}

/// Adapts a closure into a [`Scorer`].
pub struct FnScorer<F> {
    pub num_classes: usize,
    pub f: F,
}

impl<F> Scorer for FnScorer<F>
where
    F: Fn(ArrayView2<'_, f64>) -> Result<Logits>,
{
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn score(&self, frames: ArrayView2<'_, f64>) -> Result<Logits> {
        (self.f)(frames)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    /// `correct[j * N + i]`: truth-`j` examples won against `i`.
    correct: Vec<usize>,
    row_counts: Vec<usize>,
}

impl ConfusionMatrix {
    /// Tallies pairwise decisions from precomputed logits.
    pub fn from_logits<'a>(
        num_classes: usize,
        scored: impl IntoIterator<Item = (&'a Logits, Label)>,
    ) -> Result<Self> {
        let mut m = ConfusionMatrix {
            num_classes,
            correct: vec![0; num_classes * num_classes],
            row_counts: vec![0; num_classes],
        };
        for (z, truth) in scored {
            m.record(z, truth)?;
        }
        if m.row_counts.iter().all(|&c| c == 0) {
            return Err(Error::invalid("empty evaluation set"));
        }
        Ok(m)
    }

    fn record(&mut self, z: &Logits, truth: Label) -> Result<()> {
        let n = self.num_classes;
        if z.num_classes() != n || truth.0 >= n {
            return Err(Error::invalid(format!(
                "example with {} logits and label {truth} does not fit {n} classes",
                z.num_classes()
            )));
        }
        let j = truth.0;
        self.row_counts[j] += 1;
        for i in (0..n).filter(|&i| i != j) {
            if predict_among(z, &[j.min(i), j.max(i)])? == truth {
                self.correct[j * n + i] += 1;
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Examples with truth `j`; every cell of row `j` is based on this many.
    pub fn row_count(&self, j: usize) -> usize {
        self.row_counts[j]
    }

    /// Accuracy in percent; `None` for off-diagonal cells of rows with no
    /// examples. The diagonal is always `Some(0.0)`.
    pub fn get(&self, j: usize, i: usize) -> Option<f64> {
        if j == i {
            return Some(0.0);
        }
        match self.row_counts[j] {
            0 => None,
            c => Some(100.0 * self.correct[j * self.num_classes + i] as f64 / c as f64),
        }
    }

    /// Populated off-diagonal cells as `(j, i, accuracy)`.
    pub fn off_diagonal(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.num_classes;
        (0..n)
            .flat_map(move |j| (0..n).map(move |i| (j, i)))
            .filter(|(j, i)| j != i)
            .filter_map(|(j, i)| self.get(j, i).map(|a| (j, i, a)))
    }

    /// `max − min` over populated off-diagonal accuracies.
    pub fn spread(&self) -> Option<f64> {
        let (lo, hi) = self
            .off_diagonal()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, _, a)| {
                (lo.min(a), hi.max(a))
            });
        (lo <= hi).then_some(hi - lo)
    }

    /// Header row of class names, then one row per truth class. Cells of
    /// empty rows are left blank; the diagonal is written as 0.
    pub fn write_csv(&self, mut w: impl Write, class_names: &[String]) -> Result<()> {
        if class_names.len() != self.num_classes {
            return Err(Error::invalid("class name count does not match matrix"));
        }
        writeln!(w, "truth,{}", class_names.join(","))?;
        for (j, name) in class_names.iter().enumerate() {
            let cells: Vec<String> = (0..self.num_classes)
                .map(|i| match self.get(j, i) {
                    Some(a) => format!("{a:.6}"),
                    None => String::new(),
                })
                .collect();
            writeln!(w, "{name},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Default class names `class_0 .. class_{N-1}`.
pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|k| format!("class_{k}")).collect()
}

/// Scores every example once and tallies all `{truth, other}` decisions.
pub fn confusion_matrix(
    scorer: &impl Scorer,
    examples: &[FeatureSequence],
) -> Result<ConfusionMatrix> {
    if examples.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let scored = examples
        .iter()
        .map(|ex| Ok((scorer.score(ex.frames.view())?, ex.label)))
        .collect::<Result<Vec<_>>>()?;
    ConfusionMatrix::from_logits(scorer.num_classes(), scored.iter().map(|(z, y)| (z, *y)))
}

/// Weighted unordered class pairs, e.g. the most common candidate pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairList {
    entries: Vec<(usize, usize, f64)>,
}

impl PairList {
    pub fn new(entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("pair list is empty"));
        }
        for &(a, b, w) in &entries {
            if a == b {
                return Err(Error::invalid(format!("pair ({a}, {b}) repeats a class")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!("pair ({a}, {b}) has weight {w}")));
            }
        }
        if entries.iter().all(|e| e.2 == 0.0) {
            return Err(Error::invalid("all pair weights are zero"));
        }
        Ok(PairList { entries })
    }

    /// Parses `a b [weight]` lines (weight defaults to 1); `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || {
                Error::invalid(format!(
                    "pairs line {}: expected `a b [weight]`",
                    lineno + 1
                ))
            };
            let fields: Vec<&str> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|f| !f.is_empty())
                .collect();
            let (a, b, w) = match fields.as_slice() {
                [a, b] => (a, b, "1"),
                [a, b, w] => (a, b, *w),
                _ => return Err(bad()),
            };
            entries.push((
                a.parse().map_err(|_| bad())?,
                b.parse().map_err(|_| bad())?,
                w.parse().map_err(|_| bad())?,
            ));
        }
        PairList::new(entries)
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }
}

/// Mean pairwise error in percent.
///
/// Without a pair list: the mean of `100 − E[j][i]` over all ordered
/// off-diagonal pairs with data (`N(N−1)` of them for a full eval set).
/// With a pair list: the weight-normalized mean over the listed pairs,
/// each pair scored as the mean error of its two orientations.
pub fn average_pairwise_error(m: &ConfusionMatrix, pairs: Option<&PairList>) -> Result<f64> {
    let n = m.num_classes();
    let Some(pairs) = pairs else {
        let (sum, count) = m
            .off_diagonal()
            .fold((0.0, 0usize), |(s, c), (_, _, a)| (s + (100.0 - a), c + 1));
        if count == 0 {
            return Err(Error::invalid("confusion matrix has no populated cells"));
        }
        return Ok(sum / count as f64);
    };

    let mut weighted = 0.0;
    let mut total_weight = 0.0;
    for &(a, b, w) in pairs.entries() {
        if a >= n || b >= n {
            return Err(Error::invalid(format!(
                "pair ({a}, {b}) out of range for {n} classes"
            )));
        }
        let errs: Vec<f64> = [m.get(a, b), m.get(b, a)]
            .into_iter()
            .flatten()
            .map(|acc| 100.0 - acc)
            .collect();
        if errs.is_empty() || w == 0.0 {
            continue;
        }
        weighted += w * errs.iter().sum::<f64>() / errs.len() as f64;
        total_weight += w;
    }
    if total_weight == 0.0 {
        return Err(Error::invalid("no listed pair has evaluation data"));
    }
    Ok(weighted / total_weight)
}
