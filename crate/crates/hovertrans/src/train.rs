//! Training: warmup + cosine schedule, AdamW with decoupled weight decay
//! (norm scales/shifts and biases excluded), per-fold training with
//! out-of-fold score export, and k-fold orchestration.
//!
//! Training is single-threaded and every random stream is derived from
//! `(seed, purpose, ...)` tags, so runs are bit-reproducible end to end.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::{Array4, ArrayD};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore};
use crate::data::{augment, batch_to_input, make_folds, AugmentConfig, FoldSplit, ImageRecord};
use crate::error::{Error, Result};
use crate::eval::{report_from_rows, MetricsReport, ScoreRow};
use crate::model::{build_model, loss, HoverTransNet, ModelConfig, TrainState};
use crate::raster::Raster;
use crate::seed;

#[cfg(test)]
mod tests;

/// Optimization recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 32,
            base_lr: 1e-4,
            weight_decay: 0.1,
            warmup_epochs: 10,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be >= 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Validation(format!(
                "warmup_epochs {} must be < epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate at a global step: linear warm-up from 0 to `base_lr`
/// over `warmup_epochs * steps_per_epoch` steps, then cosine decay to 0
/// at step `epochs * steps_per_epoch`.
pub fn lr_at(step: u64, steps_per_epoch: usize, config: &TrainConfig) -> f64 {
    let warmup = (config.warmup_epochs * steps_per_epoch) as u64;
    let total = (config.epochs * steps_per_epoch) as u64;
    if step < warmup {
        return config.base_lr * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    config.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW: moment estimates per parameter plus decoupled weight decay
/// applied only to parameters flagged for decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<ArrayD<f64>> = store
            .iter()
            .map(|(_, p)| ArrayD::zeros(p.value.raw_dim()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters missing from `grads` see a zero gradient:
    /// their moments stay zero and only decay (if flagged) applies.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, ArrayD<f64>)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let grad = grads.iter().find(|(g, _)| *g == id).map(|(_, g)| g);
            let slot = id.0;
            let param = store.get_mut(id);
            if param.decay {
                param.value.mapv_inplace(|w| w - lr * self.weight_decay * w);
            }
            let Some(grad) = grad else {
                // zero gradient: moments stay zero, adaptive term vanishes
                continue;
            };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            ndarray::Zip::from(&mut param.value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn write_train_log(logs: &[EpochLog], path: &Path) -> Result<()> {
    let mut out = String::new();
    for log in logs {
        out.push_str(&serde_json::to_string(log).map_err(|e| Error::Runtime(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Everything one fold's training produces.
#[derive(Debug)]
pub struct FoldArtifacts {
    pub state: TrainState,
    pub scores: Vec<ScoreRow>,
    pub log: Vec<EpochLog>,
}

fn resize_all(records: &[ImageRecord], side: usize) -> Vec<Raster> {
    records
        .iter()
        .map(|r| {
            if r.image.width() == side && r.image.height() == side {
                r.image.clone()
            } else {
                r.image.resize_bilinear(side)
            }
        })
        .collect()
}

fn batch_of(
    images: &[Raster],
    records: &[ImageRecord],
    indices: &[usize],
    side: usize,
) -> Result<(Array4<f64>, Vec<usize>)> {
    let rasters: Vec<&Raster> = indices.iter().map(|&i| &images[i]).collect();
    let labels: Vec<usize> = indices.iter().map(|&i| records[i].label.index()).collect();
    Ok((batch_to_input(&rasters, side)?, labels))
}

/// Mean loss of `net` over a record set, in inference mode (no augmentation).
pub fn eval_loss(
    net: &HoverTransNet,
    images: &[Raster],
    records: &[ImageRecord],
    batch_size: usize,
) -> Result<f64> {
    let side = net.config.input_side;
    let mut total = 0.0;
    let indices: Vec<usize> = (0..records.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (batch, labels) = batch_of(images, records, chunk, side)?;
        let mut g = Graph::new();
        let trace = net.forward_graph(&mut g, &batch)?;
        let l = loss(&mut g, trace.logits, &labels)?;
        total += g.value(l)[[0]] * chunk.len() as f64;
    }
    Ok(total / records.len() as f64)
}

/// Trains `net` on `train_records`, scoring `val_records` after the final
/// epoch (final-epoch model selection; no early stopping). Emits the
/// per-image malignant probabilities and the per-epoch log.
pub fn train_fold(
    net: &mut HoverTransNet,
    train_records: &[ImageRecord],
    val_records: &[ImageRecord],
    config: &TrainConfig,
    fold: usize,
) -> Result<FoldArtifacts> {
    config.validate()?;
    let train_ids: HashSet<&str> = train_records.iter().map(|r| r.image_id.as_str()).collect();
    let val_ids: HashSet<&str> = val_records.iter().map(|r| r.image_id.as_str()).collect();
    if let Some(shared) = train_ids.intersection(&val_ids).next() {
        return Err(Error::Validation(format!(
            "image {shared} appears in both train and validation sets"
        )));
    }

    let side = net.config.input_side;
    let train_images = resize_all(train_records, side);
    let val_images = resize_all(val_records, side);
    let steps_per_epoch = train_records.len().div_ceil(config.batch_size);
    let mut optimizer = AdamW::new(&net.store, config.weight_decay);
    let mut step: u64 = 0;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_records.len()).collect();
        let mut shuffle_rng = seed::stream_tagged(config.seed, &["shuffle", &epoch.to_string()]);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for chunk in order.chunks(config.batch_size) {
            // train loader audit: a validation id must never reach a batch
            for &i in chunk {
                if val_ids.contains(train_records[i].image_id.as_str()) {
                    return Err(Error::Runtime(format!(
                        "validation image {} leaked into training",
                        train_records[i].image_id
                    )));
                }
            }
            let augmented: Vec<Raster> = chunk
                .iter()
                .map(|&i| {
                    let mut rng = seed::stream_tagged(
                        config.seed,
                        &["aug", &epoch.to_string(), &train_records[i].image_id],
                    );
                    augment(&train_images[i], &config.augment, &mut rng)
                })
                .collect();
            let rasters: Vec<&Raster> = augmented.iter().collect();
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| train_records[i].label.index())
                .collect();
            let batch = batch_to_input(&rasters, side)?;

            let mut g = Graph::new();
            let trace = net.forward_graph(&mut g, &batch)?;
            let l = loss(&mut g, trace.logits, &labels)?;
            let loss_value = g.value(l)[[0]];
            if !loss_value.is_finite() {
                return Err(Error::Runtime(format!(
                    "non-finite loss at step {step} (epoch {epoch})"
                )));
            }
            epoch_loss += loss_value * chunk.len() as f64;
            g.backward(l);
            let grads = g.param_grads();
            let lr = lr_at(step, steps_per_epoch, config);
            optimizer.step(&mut net.store, &grads, lr);
            last_lr = lr;
            step += 1;
        }
        let train_loss = epoch_loss / train_records.len() as f64;
        let val_loss = eval_loss(net, &val_images, val_records, config.batch_size)?;
        log.push(EpochLog { epoch, lr: last_lr, train_loss, val_loss });
    }

    let mut scores = Vec::with_capacity(val_records.len());
    let indices: Vec<usize> = (0..val_records.len()).collect();
    for chunk in indices.chunks(config.batch_size) {
        let (batch, _) = batch_of(&val_images, val_records, chunk, side)?;
        let probs = net.predict_malignant(&batch)?;
        for (&i, prob) in chunk.iter().zip(probs) {
            scores.push(ScoreRow {
                image_id: val_records[i].image_id.clone(),
                fold,
                score_malignant: prob,
                label: val_records[i].label.index(),
            });
        }
    }

    let last = log.last().expect("at least one epoch");
    let state = TrainState {
        seed: config.seed,
        epoch: config.epochs,
        step,
        train_loss: Some(last.train_loss),
        val_loss: Some(last.val_loss),
    };
    Ok(FoldArtifacts { state, scores, log })
}

/// Per-fold seed so fold models are independent but reproducible.
pub fn fold_seed(seed_value: u64, fold: usize) -> u64 {
    let key = seed::derive_key(seed_value, &[b"fold-model", &(fold as u64).to_le_bytes()]);
    u64::from_le_bytes(key[..8].try_into().unwrap())
}

/// Artifacts of a full cross-validation run.
pub struct CrossValArtifacts {
    pub nets: Vec<HoverTransNet>,
    pub fold_artifacts: Vec<FoldArtifacts>,
    /// Union of the per-fold score tables: one out-of-fold row per image.
    pub scores: Vec<ScoreRow>,
    pub report: MetricsReport,
}

/// Trains one model per fold of `split` and aggregates out-of-fold metrics.
pub fn cross_validate_with_split(
    records: &[ImageRecord],
    split: &FoldSplit,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    threshold: f64,
) -> Result<CrossValArtifacts> {
    let mut nets = Vec::with_capacity(split.k);
    let mut fold_artifacts = Vec::with_capacity(split.k);
    let mut scores = Vec::with_capacity(records.len());
    for fold in 0..split.k {
        let (mut train_records, mut val_records) = (Vec::new(), Vec::new());
        for r in records {
            match split.fold_of(&r.image_id) {
                Some(f) if f == fold => val_records.push(r.clone()),
                Some(_) => train_records.push(r.clone()),
                None => {
                    return Err(Error::Validation(format!(
                        "image {} missing from the fold split",
                        r.image_id
                    )))
                }
            }
        }
        let mut net = build_model(model_config, fold_seed(train_config.seed, fold))?;
        let mut fold_cfg = train_config.clone();
        fold_cfg.seed = fold_seed(train_config.seed, fold);
        let artifacts = train_fold(&mut net, &train_records, &val_records, &fold_cfg, fold)?;
        scores.extend(artifacts.scores.iter().cloned());
        nets.push(net);
        fold_artifacts.push(artifacts);
    }
    let birads: BTreeMap<String, crate::data::BiRads> = records
        .iter()
        .filter_map(|r| r.birads.map(|b| (r.image_id.clone(), b)))
        .collect();
    let report = report_from_rows(
        &scores,
        threshold,
        if birads.is_empty() { None } else { Some(&birads) },
    )?;
    Ok(CrossValArtifacts { nets, fold_artifacts, scores, report })
}

/// Five-fold style orchestration: makes the stratified split internally.
pub fn cross_validate(
    records: &[ImageRecord],
    k: usize,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    threshold: f64,
) -> Result<CrossValArtifacts> {
    let split = make_folds(records, k, train_config.seed)?;
    cross_validate_with_split(records, &split, model_config, train_config, threshold)
}
