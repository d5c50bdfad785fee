mod common;

use tempfile::TempDir;
use tuplemax_core::datagen::{class_geometry, generate, CorpusSpec};
use tuplemax_core::evalharness::{
    self, average_pairwise_error, FnScorer, WindowConfig, WindowedModel,
};
use tuplemax_core::training::{
    load_checkpoint, mean_loss, save_checkpoint, train, train_from, TrainConfig, DEFAULT_SOFTMAX_LR,
};
use tuplemax_core::{Logits, LossKind, ModelConfig, ModelParameters, TupleSizePrior};

fn bits(p: &ModelParameters) -> Vec<u64> {
    p.tensors()
        .iter()
        .flat_map(|t| t.iter().map(|v| v.to_bits()))
        .collect()
}

fn easy_spec() -> CorpusSpec {
    CorpusSpec {
        num_classes: 2,
        input_dim: 4,
        num_clusters: 1,
        intra_cluster_sep: 3.0,
        noise: 0.3,
        min_len: 6,
        max_len: 10,
        train_per_class: 40,
        eval_per_class: 10,
        ..CorpusSpec::default()
    }
}

fn small_model(spec: &CorpusSpec) -> ModelConfig {
    ModelConfig::desk_default(spec.input_dim, spec.num_classes)
}

#[test]
fn separable_two_class_loss_decreases() {
    let spec = easy_spec();
    let (tr, ev) = generate(&spec).unwrap();
    for loss in [LossKind::Softmax, LossKind::Pairwise] {
        let mut cfg = TrainConfig::new(loss.clone(), 0.3, 300, 1);
        cfg.checkpoint_every = 50;
        let out = train(&cfg, &small_model(&spec), &tr, Some(&ev)).unwrap();
        let first = out.curve.first().unwrap().train_loss;
        let last = out.curve.last().unwrap().train_loss;
        assert!(last < 0.5 * first, "{}: {first} -> {last}", loss.name());
        assert!(out.errors().last().unwrap() < &5.0);
    }
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let spec = easy_spec();
    let (tr, _) = generate(&spec).unwrap();
    let model_cfg = small_model(&spec);
    let mut cfg = TrainConfig::new(LossKind::Softmax, 0.0, 20, 4);
    cfg.checkpoint_every = 5;
    let out = train(&cfg, &model_cfg, &tr, None).unwrap();
    let init = bits(&ModelParameters::init(&model_cfg, 4).unwrap());
    assert_eq!(out.checkpoints.len(), 4);
    assert!(out.checkpoints.iter().all(|c| bits(&c.params) == init));
}

#[test]
fn training_is_deterministic_and_counts_checkpoints() {
    let spec = easy_spec();
    let (tr, ev) = generate(&spec).unwrap();
    let loss = LossKind::Tuplemax {
        prior: TupleSizePrior::pairwise(),
        sampling: None,
    };
    let mut cfg = TrainConfig::new(loss, 0.5, 25, 9);
    cfg.checkpoint_every = 10;
    let a = train(&cfg, &small_model(&spec), &tr, Some(&ev)).unwrap();
    let b = train(&cfg, &small_model(&spec), &tr, Some(&ev)).unwrap();
    // ⌈25 / 10⌉ checkpoints, the last one at the final step.
    assert_eq!(
        a.curve.iter().map(|p| p.step).collect::<Vec<_>>(),
        [10, 20, 25]
    );
    assert_eq!(a.curve, b.curve);
    for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert_eq!(bits(&x.params), bits(&y.params));
    }
}

#[test]
fn full_batch_step_descends() {
    let spec = easy_spec();
    let (tr, _) = generate(&spec).unwrap();
    let model_cfg = small_model(&spec);
    let params = ModelParameters::init(&model_cfg, 2).unwrap();
    for loss in [LossKind::Softmax, LossKind::Pairwise] {
        let before = mean_loss(&params, &loss, &tr.examples).unwrap();
        // One batch covering the whole epoch is the exact mean gradient.
        let mut cfg = TrainConfig::new(loss.clone(), 1e-3, 1, 0);
        cfg.batch_size = tr.len();
        let out = train_from(&cfg, params.clone(), &tr, None).unwrap();
        let after = mean_loss(&out.final_checkpoint().params, &loss, &tr.examples).unwrap();
        assert!(after < before, "{}: {before} -> {after}", loss.name());
    }
}

#[test]
fn checkpoint_files_round_trip() {
    let spec = easy_spec();
    let (tr, _) = generate(&spec).unwrap();
    let mut cfg = TrainConfig::new(LossKind::Softmax, 0.1, 10, 3);
    cfg.checkpoint_every = 10;
    let out = train(&cfg, &small_model(&spec), &tr, None).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(out.final_checkpoint(), &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.step, 10);
    assert_eq!(
        back.train_loss.to_bits(),
        out.final_checkpoint().train_loss.to_bits()
    );
    assert_eq!(bits(&back.params), bits(&out.final_checkpoint().params));
    assert_eq!(back.params.config(), out.final_checkpoint().params.config());
}

#[test]
fn nearest_mean_is_perfect_in_the_separable_limit() {
    let spec = CorpusSpec {
        noise: 1e-3,
        intra_cluster_sep: 5.0,
        ..CorpusSpec::default()
    };
    let geometry = class_geometry(&spec).unwrap();
    let (_, ev) = generate(&spec).unwrap();
    let scorer = FnScorer {
        num_classes: spec.num_classes,
        f: |frames: ndarray::ArrayView2<'_, f64>| {
            let avg = frames.mean_axis(ndarray::Axis(0)).unwrap();
            let scores = geometry
                .means
                .iter()
                .zip(&geometry.drifts)
                .map(|(m, d)| {
                    let centre = m + &(d * 0.5);
                    -(&avg - &centre).mapv(|v| v * v).sum()
                })
                .collect();
            Logits::new(scores)
        },
    };
    let m = evalharness::confusion_matrix(&scorer, &ev.examples).unwrap();
    assert_eq!(average_pairwise_error(&m, None).unwrap(), 0.0);
}

#[test]
fn trained_softmax_confuses_within_clusters_more() {
    let spec = CorpusSpec::default();
    let (tr, ev) = generate(&spec).unwrap();
    let cfg = TrainConfig::new(LossKind::Softmax, DEFAULT_SOFTMAX_LR, 1500, 0);
    let out = train(&cfg, &small_model(&spec), &tr, Some(&ev)).unwrap();
    let scorer = WindowedModel {
        params: &out.final_checkpoint().params,
        window: WindowConfig::whole(64),
    };
    let m = evalharness::confusion_matrix(&scorer, &ev.examples).unwrap();
    let (mut within, mut across) = (Vec::new(), Vec::new());
    for (j, i, acc) in m.off_diagonal() {
        if spec.cluster_of(j) == spec.cluster_of(i) {
            within.push(100.0 - acc);
        } else {
            across.push(100.0 - acc);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&within) > mean(&across),
        "within {within:?} across {across:?}"
    );
}
