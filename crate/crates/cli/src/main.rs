//! `tuplemax`: generate corpora, train with any loss in the family,
//! evaluate pairwise confusion and compare runs.

mod manifest;

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use tuplemax_core::datagen::{self, CorpusSpec};
use tuplemax_core::evalharness::{self, PairList, WindowConfig, WindowedModel};
use tuplemax_core::losses;
use tuplemax_core::training::{self, TrainConfig};
use tuplemax_core::{Label, Logits, LossKind, ModelConfig, SamplingConfig, TupleSizePrior};

use manifest::ManifestBuilder;

const TRAIN_FILE: &str = "train.bin";
const EVAL_FILE: &str = "eval.bin";
const CURVE_FILE: &str = "curve.csv";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "tuplemax",
    version,
    about = "Tuple-conditioned classification experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic train/eval corpus.
    GenData(GenDataArgs),
    /// Train a classifier, writing checkpoints and a curve CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or every checkpoint of a run) on the eval split.
    Eval(EvalArgs),
    /// Merge the per-checkpoint error curves of several runs.
    Compare(CompareArgs),
    /// Print a loss value and its gradient for given logits.
    LossEval(LossEvalArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    clusters: usize,
    #[arg(long)]
    intra_sep: Option<f64>,
    #[arg(long)]
    inter_sep: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    eval_per_class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

impl GenDataArgs {
    fn spec(&self) -> CorpusSpec {
        let d = CorpusSpec::default();
        CorpusSpec {
            num_classes: self.classes,
            input_dim: self.dim,
            num_clusters: self.clusters,
            intra_cluster_sep: self.intra_sep.unwrap_or(d.intra_cluster_sep),
            inter_cluster_sep: self.inter_sep.unwrap_or(d.inter_cluster_sep),
            noise: self.noise.unwrap_or(d.noise),
            drift: self.drift.unwrap_or(d.drift),
            min_len: self.min_len.unwrap_or(d.min_len),
            max_len: self.max_len.unwrap_or(d.max_len),
            train_per_class: self.train_per_class.unwrap_or(d.train_per_class),
            eval_per_class: self.eval_per_class.unwrap_or(d.eval_per_class),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum TrainLoss {
    Softmax,
    Pairwise,
    Tuplemax,
}

impl TrainLoss {
    /// Per-loss learning rates tuned on the default synthetic corpus.
    fn default_learning_rate(self) -> f64 {
        match self {
            TrainLoss::Softmax => training::DEFAULT_SOFTMAX_LR,
            TrainLoss::Pairwise | TrainLoss::Tuplemax => training::DEFAULT_TUPLEMAX_LR,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    loss: TrainLoss,
    /// Tuple-size prior: lines of `n probability` (tuplemax only).
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Sample count for tuple sizes too large to enumerate (tuplemax only).
    #[arg(long)]
    samples: Option<usize>,
    /// Directory holding train.bin and eval.bin.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Defaults to the tuned rate for the chosen loss.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 100)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::DEFAULT_CLIP_NORM)]
    clip_norm: f64,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_MAX_SEQ_LEN)]
    max_seq_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// A checkpoint file, or a run directory to evaluate every checkpoint in it.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Weighted pair list: lines of `a b [weight]`.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Window length in frames; defaults to the model's max sequence length.
    #[arg(long)]
    window: Option<usize>,
    /// Hop in frames; defaults to the window length.
    #[arg(long)]
    hop: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossMode {
    Softmax,
    Pairwise,
    Tuple,
    Tuplemax,
}

#[derive(Debug, Args)]
struct LossEvalArgs {
    /// Comma-separated logits.
    #[arg(long, allow_hyphen_values = true)]
    logits: String,
    #[arg(long)]
    label: usize,
    #[arg(long, value_enum)]
    mode: LossMode,
    #[arg(long)]
    tuple_size: Option<usize>,
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::LossEval(a) => loss_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_prior(path: &Path) -> Result<TupleSizePrior> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    TupleSizePrior::parse(&text).with_context(|| format!("invalid prior {}", path.display()))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("gen-data");
    let spec = args.spec();
    let (train, eval) = datagen::generate(&spec).context("invalid corpus spec")?;
    create_dir(&args.out)?;
    for (corpus, name) in [(&train, TRAIN_FILE), (&eval, EVAL_FILE)] {
        let path = args.out.join(name);
        datagen::save_corpus(corpus, &path)
            .with_context(|| format!("writing {}", path.display()))?;
        manifest.artifact(path);
    }
    manifest.finish(&spec, Some(spec.seed), &args.out.join(MANIFEST_FILE))
}

fn load_split(dir: &Path, name: &str) -> Result<datagen::Corpus> {
    let path = dir.join(name);
    datagen::load_corpus(&path).with_context(|| format!("loading {}", path.display()))
}

fn checkpoint_name(step: usize) -> String {
    format!("checkpoint_{step:06}.bin")
}

fn train(args: TrainArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("train");
    if args.loss != TrainLoss::Tuplemax {
        ensure!(
            args.prior.is_none(),
            "--prior only applies to --loss tuplemax"
        );
        ensure!(
            args.samples.is_none(),
            "--samples only applies to --loss tuplemax"
        );
    }
    let loss = match args.loss {
        TrainLoss::Softmax => LossKind::Softmax,
        TrainLoss::Pairwise => LossKind::Pairwise,
        TrainLoss::Tuplemax => LossKind::Tuplemax {
            prior: match &args.prior {
                Some(p) => read_prior(p)?,
                None => TupleSizePrior::default(),
            },
            sampling: args
                .samples
                .map(|m| SamplingConfig::new(m, args.seed))
                .transpose()?,
        },
    };
    let train_set = load_split(&args.data, TRAIN_FILE)?;
    let eval_set = load_split(&args.data, EVAL_FILE)?;
    let model_cfg = ModelConfig {
        max_seq_len: args.max_seq_len,
        ..ModelConfig::desk_default(train_set.input_dim, train_set.num_classes)
    };
    let config = TrainConfig {
        loss,
        learning_rate: args.lr.unwrap_or(args.loss.default_learning_rate()),
        batch_size: args.batch,
        total_steps: args.steps,
        checkpoint_every: args.checkpoint_every,
        seed: args.seed,
        clip_norm: args.clip_norm,
        eval_window: None,
    };
    let outcome = training::train(&config, &model_cfg, &train_set, Some(&eval_set))?;

    create_dir(&args.out)?;
    for c in &outcome.checkpoints {
        let path = args.out.join(checkpoint_name(c.step));
        training::save_checkpoint(c, &path)
            .with_context(|| format!("writing {}", path.display()))?;
        manifest.artifact(path);
    }
    let curve_path = args.out.join(CURVE_FILE);
    write_file(&curve_path, |w| {
        Ok(training::write_curve_csv(&outcome.curve, w)?)
    })?;
    manifest.artifact(curve_path);
    let resolved = json!({
        "train": config,
        "model": model_cfg,
        "data": args.data,
    });
    manifest.finish(resolved, Some(args.seed), &args.out.join(MANIFEST_FILE))
}

/// Checkpoint files of a run directory in step order.
fn run_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()?;
    paths.retain(|p| {
        p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("checkpoint_") && n.ends_with(".bin"))
    });
    paths.sort();
    ensure!(!paths.is_empty(), "no checkpoints in {}", dir.display());
    Ok(paths)
}

fn eval(args: EvalArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("eval");
    let paths = if args.checkpoint.is_dir() {
        run_checkpoints(&args.checkpoint)?
    } else {
        vec![args.checkpoint.clone()]
    };
    let eval_set = load_split(&args.data, EVAL_FILE)?;
    let pairs = args
        .pairs
        .as_ref()
        .map(|p| -> Result<PairList> {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PairList::parse(&text).with_context(|| format!("invalid pairs file {}", p.display()))
        })
        .transpose()?;
    if let Some(pairs) = &pairs {
        if let Some(&(a, b, _)) = pairs
            .entries()
            .iter()
            .find(|(a, b, _)| *a >= eval_set.num_classes || *b >= eval_set.num_classes)
        {
            bail!(
                "pairs file lists ({a}, {b}) but the corpus has {} classes",
                eval_set.num_classes
            );
        }
    }

    let mut errors = Vec::with_capacity(paths.len());
    let mut last = None;
    let mut window_used = None;
    for path in &paths {
        let ckpt = training::load_checkpoint(path)
            .with_context(|| format!("loading {}", path.display()))?;
        let cfg = ckpt.params.config();
        ensure!(
            cfg.num_classes == eval_set.num_classes && cfg.input_dim == eval_set.input_dim,
            "checkpoint {} does not match the corpus shape",
            path.display()
        );
        let length = args.window.unwrap_or(cfg.max_seq_len);
        let window = WindowConfig::new(length, args.hop.unwrap_or(length))?;
        let scorer = WindowedModel {
            params: &ckpt.params,
            window,
        };
        let matrix = evalharness::confusion_matrix(&scorer, &eval_set.examples)?;
        errors.push(evalharness::average_pairwise_error(&matrix, None)?);
        window_used = Some(window);
        last = Some(matrix);
    }
    let matrix = last.expect("at least one checkpoint");

    create_dir(&args.out)?;
    let csv_path = args.out.join("confusion.csv");
    let names = evalharness::class_names(matrix.num_classes());
    write_file(&csv_path, |w| Ok(matrix.write_csv(w, &names)?))?;
    manifest.artifact(csv_path);

    let mut report = format!(
        "all_pairs_error_pct,{:.6}\n",
        errors.last().expect("nonempty")
    );
    if let Some(pairs) = &pairs {
        let top = evalharness::average_pairwise_error(&matrix, Some(pairs))?;
        report += &format!("top_pairs_error_pct,{top:.6}\n");
    }
    if paths.len() > 1 {
        report += &format!("{}\n", training::checkpoint_report(&errors)?);
    }
    let report_path = args.out.join("report.txt");
    fs::write(&report_path, &report)
        .with_context(|| format!("writing {}", report_path.display()))?;
    manifest.artifact(report_path);
    print!("{report}");

    let resolved = json!({
        "checkpoints": paths,
        "data": args.data,
        "pairs": args.pairs,
        "window": window_used,
    });
    manifest.finish(resolved, None, &args.out.join(MANIFEST_FILE))
}

/// Population standard deviation.
fn std_dev(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

const STD_TAIL: usize = 10;

fn compare(args: CompareArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("compare");
    let mut names = Vec::new();
    let mut curves = Vec::new();
    for run in &args.runs {
        let path = run.join(CURVE_FILE);
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let curve = training::parse_curve_csv(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        ensure!(!curve.is_empty(), "{} has no rows", path.display());
        names.push(
            run.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("run{}", names.len() + 1)),
        );
        curves.push(curve);
    }
    let steps: Vec<usize> = curves[0].iter().map(|p| p.step).collect();
    for (name, curve) in names.iter().zip(&curves).skip(1) {
        let other: Vec<usize> = curve.iter().map(|p| p.step).collect();
        ensure!(
            other == steps,
            "step grid mismatch: run `{name}` has steps {other:?}, run `{}` has {steps:?}",
            names[0]
        );
    }

    let errors: Vec<Vec<f64>> = curves
        .iter()
        .map(|c| c.iter().map(|p| p.pairwise_error_pct).collect())
        .collect();
    let mut out = String::new();
    out += "step";
    for n in &names {
        out += &format!(",{n}_error");
    }
    out += "\n";
    for (row, step) in steps.iter().enumerate() {
        out += &step.to_string();
        for e in &errors {
            out += &format!(",{:.6}", e[row]);
        }
        out += "\n";
    }
    type Summary = (&'static str, fn(&[f64]) -> f64);
    let summaries: [Summary; 4] = [
        ("last", |e| *e.last().expect("nonempty")),
        ("mean", |e| e.iter().sum::<f64>() / e.len() as f64),
        ("min", |e| e.iter().copied().fold(f64::INFINITY, f64::min)),
        ("std_final10", |e| {
            std_dev(&e[e.len().saturating_sub(STD_TAIL)..])
        }),
    ];
    for (label, f) in summaries {
        out += label;
        for e in &errors {
            out += &format!(",{:.6}", f(e));
        }
        out += "\n";
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&args.out, &out).with_context(|| format!("writing {}", args.out.display()))?;
    manifest.artifact(args.out.clone());
    let mut manifest_path = args.out.clone().into_os_string();
    manifest_path.push(".manifest.json");
    manifest.finish(
        json!({ "runs": args.runs }),
        None,
        Path::new(&manifest_path),
    )
}

fn parse_logits(text: &str) -> Result<Logits> {
    let scores = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad logit `{}`", s.trim()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Logits::new(scores)?)
}

fn loss_eval(args: LossEvalArgs) -> Result<()> {
    let z = parse_logits(&args.logits)?;
    let y = Label(args.label);
    let sampling = match (args.samples, args.seed) {
        (Some(m), seed) => Some(SamplingConfig::new(m, seed.unwrap_or(0))?),
        (None, Some(_)) => bail!("--seed requires --samples"),
        (None, None) => None,
    };
    let result = match args.mode {
        LossMode::Softmax | LossMode::Pairwise => {
            ensure!(
                args.tuple_size.is_none() && args.prior.is_none() && sampling.is_none(),
                "--tuple-size, --prior and --samples do not apply to this mode"
            );
            if args.mode == LossMode::Softmax {
                losses::softmax_loss(&z, y)?
            } else {
                losses::pairwise_loss(&z, y)?
            }
        }
        LossMode::Tuple => {
            ensure!(
                args.prior.is_none(),
                "--prior applies to --mode tuplemax only"
            );
            let n = args
                .tuple_size
                .context("--mode tuple requires --tuple-size")?;
            match sampling {
                Some(cfg) => losses::tuple_loss_sampled(&z, y, n, cfg)?,
                None => losses::tuple_loss_exact(&z, y, n)?,
            }
        }
        LossMode::Tuplemax => {
            ensure!(
                args.tuple_size.is_none(),
                "--tuple-size applies to --mode tuple only"
            );
            let prior = match &args.prior {
                Some(p) => read_prior(p)?,
                None => TupleSizePrior::default(),
            };
            losses::tuplemax_loss(&z, y, &prior, sampling)?
        }
    };
    let gradient: Vec<String> = result.gradient.iter().map(|g| format!("{g:.6}")).collect();
    println!("value,{:.6}", result.value);
    println!("gradient,{}", gradient.join(","));
    Ok(())
}
