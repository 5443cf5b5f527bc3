use ndarray::{ArrayD, IxDyn};

use crate::data::synth::{generate, SynthConfig};
use crate::model::ModelConfig;

use super::*;

fn schedule_config() -> TrainConfig {
    TrainConfig {
        epochs: 250,
        warmup_epochs: 10,
        base_lr: 1e-4,
        ..TrainConfig::default()
    }
}

#[test]
fn lr_schedule_endpoints_and_continuity() {
    let cfg = schedule_config();
    let spe = 10usize;
    let warmup = (cfg.warmup_epochs * spe) as u64;
    let total = (cfg.epochs * spe) as u64;
    assert_eq!(lr_at(0, spe, &cfg), 0.0);
    assert_eq!(lr_at(warmup, spe, &cfg), cfg.base_lr);
    assert_eq!(lr_at(total, spe, &cfg), 0.0);
    // continuity at the junction: both branch formulas agree there
    let warmup_side = cfg.base_lr * warmup as f64 / warmup as f64;
    let cosine_side = lr_at(warmup, spe, &cfg);
    assert!((warmup_side - cosine_side).abs() < 1e-12);
    // monotone rise during warmup, decay during cosine
    assert!(lr_at(warmup / 2, spe, &cfg) < cfg.base_lr);
    assert!(lr_at(warmup + (total - warmup) / 2, spe, &cfg) < cfg.base_lr);
}

#[test]
fn decoupled_decay_closed_form_on_zero_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("w", ArrayD::from_elem(IxDyn(&[3]), 2.0), true);
    let norm = store.add("norm.scale", ArrayD::ones(IxDyn(&[3])), false);
    let mut opt = AdamW::new(&store, 0.1);
    let lr = 0.01;
    let k = 25;
    for _ in 0..k {
        opt.step(&mut store, &[], lr);
    }
    let expect = 2.0 * (1.0 - lr * 0.1f64).powi(k);
    for &v in store.get(id).value.iter() {
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }
    // non-decayed parameters are untouched by decay
    for &v in store.get(norm).value.iter() {
        assert_eq!(v, 1.0);
    }
}

#[test]
fn adamw_moves_against_the_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("w", ArrayD::zeros(IxDyn(&[2])), true);
    let mut opt = AdamW::new(&store, 0.0);
    let grad = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, -1.0]).unwrap();
    for _ in 0..10 {
        opt.step(&mut store, &[(id, grad.clone())], 0.1);
    }
    let v = &store.get(id).value;
    assert!(v[[0]] < -0.5 && v[[1]] > 0.5, "{v:?}");
}

#[test]
fn overlapping_train_and_val_sets_are_rejected() {
    let records = generate(&SynthConfig { side: 32, count: 6, seed: 1 });
    let mut net = build_model(&ModelConfig::tiny(), 1).unwrap();
    let cfg = TrainConfig { epochs: 1, warmup_epochs: 0, batch_size: 4, ..TrainConfig::default() };
    let err = train_fold(&mut net, &records, &records[..2].to_vec(), &cfg, 0).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
}

fn quick_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        base_lr: 2e-3,
        weight_decay: 0.1,
        warmup_epochs: 2,
        seed: 7,
        augment: AugmentConfig::disabled(),
    }
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let records = generate(&SynthConfig { side: 32, count: 16, seed: 3 });
    let (train, val) = records.split_at(8);
    let run = || {
        let mut net = build_model(&ModelConfig::tiny(), 5).unwrap();
        let artifacts =
            train_fold(&mut net, &train.to_vec(), &val.to_vec(), &quick_train_config(12), 0)
                .unwrap();
        (net, artifacts)
    };
    let (net_a, art_a) = run();
    let (net_b, art_b) = run();

    let first = art_a.log.first().unwrap().train_loss;
    let last = art_a.log.last().unwrap().train_loss;
    assert!(last < first, "loss did not decrease: {first} -> {last}");

    // bit-level determinism of parameters, logs, and scores
    assert_eq!(net_a.store.flatten(), net_b.store.flatten());
    assert_eq!(art_a.log.len(), art_b.log.len());
    for (x, y) in art_a.log.iter().zip(&art_b.log) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
    }
    for (x, y) in art_a.scores.iter().zip(&art_b.scores) {
        assert_eq!(x.score_malignant.to_bits(), y.score_malignant.to_bits());
    }

    // log schema round-trips as JSONL
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    write_train_log(&art_a.log, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 12);
    let parsed: EpochLog = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(parsed.epoch, 0);
}

#[test]
fn cross_validation_scores_partition_the_records() {
    let records = generate(&SynthConfig { side: 32, count: 12, seed: 9 });
    let artifacts = cross_validate(
        &records,
        3,
        &ModelConfig::tiny(),
        &quick_train_config(2),
        0.5,
    )
    .unwrap();
    assert_eq!(artifacts.scores.len(), 12);
    let mut ids: Vec<&str> = artifacts.scores.iter().map(|r| r.image_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 12, "duplicate out-of-fold predictions");
    assert_eq!(artifacts.nets.len(), 3);
    assert_eq!(artifacts.report.folds.len(), 3);
    // synthetic records carry BI-RADS, so subgroups appear
    assert!(!artifacts.report.subgroups.is_empty());
}
