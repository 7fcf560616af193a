//! Training loops: cross-entropy pretraining, self-critical fine-tuning,
//! recognition-head training, evaluation, and the tree-threshold sweep.
//!
//! All loops are deterministic given (dataset, config): scene shuffles come
//! from a seeded generator, per-scene work runs in parallel but gradients
//! merge in scene order, and the optimizer sweep is serialized.

pub mod eval;
pub mod loss;
pub mod recognition;
pub mod sweep;
pub mod verify;

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::SceneRecord;
use crate::error::{HipError, Result};
use crate::metrics::{cider_d, corpus_bleu, tokenize, Corpus};
use crate::model::Model;
use crate::numerics::{adam_step, AdamConfig, ParamStore};

pub use eval::{evaluate, EvaluationReport, ImageEval};
pub use loss::{ce_batch, scst_step};
pub use recognition::{
    evaluate_recognition, predict_top_k, recognition_loss, train_recognition, RecognitionInput,
    RecognitionModel,
};
pub use sweep::{sweep_csv, sweep_epsilon, SweepRow, DEFAULT_EPSILON_GRID};
pub use verify::full_pipeline_gradcheck;

/// Loop hyperparameters. Model shape (dimensions, tree threshold, ablation
/// switches) lives in [`crate::model::ModelConfig`].
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Cross-entropy learning rate.
    pub lr: f64,
    /// Self-critical learning rate.
    pub scst_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Beam width for validation decoding (1 = greedy).
    pub val_beam: usize,
    /// Weight of the recognition loss when the model has a head and scenes
    /// carry labels; 0 disables the joint term.
    pub recognition_weight: f64,
    /// Where to save the best-validation checkpoint, if anywhere.
    pub checkpoint: Option<PathBuf>,
    /// Where to write the epoch CSV log, if anywhere.
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 5e-4,
            scst_lr: 5e-5,
            batch_size: 50,
            epochs: 30,
            seed: 0,
            clip_norm: 5.0,
            val_beam: 1,
            recognition_weight: 1.0,
            checkpoint: None,
            log: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 || !self.scst_lr.is_finite() || self.scst_lr < 0.0 {
            return Err(HipError::Config("learning rates must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(HipError::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(HipError::Config("epoch count must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(HipError::Config("clip norm must be positive".into()));
        }
        if self.val_beam == 0 {
            return Err(HipError::Config("validation beam width must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the epoch log.
#[derive(Clone, Copy, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub ce_loss: f64,
    pub val_bleu4: f64,
    pub val_cider: f64,
    pub wall_seconds: f64,
}

/// Everything a cross-entropy run reports.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    /// 1-based epoch with the best validation CIDEr-D.
    pub best_epoch: usize,
    pub best_val_cider: f64,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.rows.first().map_or(f64::NAN, |r| r.ce_loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.ce_loss)
    }

    /// The full epoch log, wall-clock column included.
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,ce_loss,val_bleu4,val_cider,wall_seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.3}\n",
                r.epoch, r.ce_loss, r.val_bleu4, r.val_cider, r.wall_seconds
            ));
        }
        out
    }

    /// The epoch log without the wall-clock column; byte-identical across
    /// runs with the same seed (wall time is a measurement, not a result).
    pub fn stable_csv(&self) -> String {
        let mut out = String::from("epoch,ce_loss,val_bleu4,val_cider\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                r.epoch, r.ce_loss, r.val_bleu4, r.val_cider
            ));
        }
        out
    }
}

/// One line of the self-critical log.
#[derive(Clone, Copy, Debug)]
pub struct ScstEpochRow {
    pub epoch: usize,
    pub pseudo_loss: f64,
    /// Mean (sampled − greedy) CIDEr-D advantage over the epoch.
    pub mean_reward: f64,
    /// Mean greedy CIDEr-D on the training split after the epoch.
    pub greedy_cider: f64,
    pub wall_seconds: f64,
}

/// Self-critical fine-tuning report.
#[derive(Clone, Debug)]
pub struct ScstReport {
    pub rows: Vec<ScstEpochRow>,
}

impl ScstReport {
    /// Moving average of the per-epoch greedy CIDEr-D, window `w`.
    pub fn greedy_cider_moving_average(&self, w: usize) -> Vec<f64> {
        if w == 0 || self.rows.len() < w {
            return Vec::new();
        }
        self.rows
            .windows(w)
            .map(|win| win.iter().map(|r| r.greedy_cider).sum::<f64>() / w as f64)
            .collect()
    }
}

fn tokenized_references(records: &[SceneRecord]) -> Vec<Vec<Vec<String>>> {
    records
        .iter()
        .map(|r| r.captions.iter().map(|c| tokenize(c)).collect())
        .collect()
}

/// Greedy/beam captions for every record, in order.
fn decode_split(model: &Model, store: &ParamStore, records: &[SceneRecord], beam: usize) -> Result<Vec<Vec<String>>> {
    records
        .par_iter()
        .map(|record| {
            let regions = record.to_regions()?;
            let tokens = model.caption(store, &regions, record.edges.as_deref(), beam)?;
            Ok(tokenize(&model.config.vocab.decode(&tokens)))
        })
        .collect()
}

/// Corpus BLEU@4 and mean per-image CIDEr-D of a decoded split.
fn split_metrics(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    corpus: &Corpus,
) -> Result<(f64, f64)> {
    let bleu4 = corpus_bleu(candidates, references, 4)?;
    let mut cider_total = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        cider_total += cider_d(cand, refs, corpus)?;
    }
    Ok((bleu4, cider_total / candidates.len() as f64))
}

/// Cross-entropy training with per-epoch validation.
///
/// Deterministic given (datasets, config, the store's initial state):
/// identical runs produce identical logs (modulo wall time) and identical
/// checkpoints. The checkpoint, when a path is configured, always holds the
/// parameters with the best validation CIDEr-D so far.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    train_set: &[SceneRecord],
    val_set: &[SceneRecord],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(HipError::Input("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(HipError::Input("validation split is empty".into()));
    }
    let val_refs = tokenized_references(val_set);
    let val_corpus = Corpus::from_references(&val_refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adam = AdamConfig::with_lr(config.lr);
    let joint_recognition =
        config.recognition_weight > 0.0 && model.config.recognition_classes.is_some();

    let mut rows = Vec::with_capacity(config.epochs);
    let mut best_epoch = 0;
    let mut best_val_cider = f64::NEG_INFINITY;
    let mut indices: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        indices.shuffle(&mut rng);
        let mut loss_acc = 0.0;
        let mut pair_total = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            let batch: Vec<&SceneRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
            let pairs: usize = batch.iter().map(|r| r.captions.len()).sum();
            let loss = ce_batch(model, store, &batch)?;
            if joint_recognition {
                loss::recognition_batch(model, store, &batch, config.recognition_weight)?;
            }
            store.fill_missing_grads();
            store.clip_grad_norm(config.clip_norm);
            adam_step(store, &adam)?;
            loss_acc += loss * pairs as f64;
            pair_total += pairs;
        }
        let ce_loss = loss_acc / pair_total as f64;

        let candidates = decode_split(model, store, val_set, config.val_beam)?;
        let (val_bleu4, val_cider) = split_metrics(&candidates, &val_refs, &val_corpus)?;

        rows.push(EpochRow {
            epoch,
            ce_loss,
            val_bleu4,
            val_cider,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if val_cider > best_val_cider {
            best_val_cider = val_cider;
            best_epoch = epoch;
            if let Some(path) = &config.checkpoint {
                model.save(store, path)?;
            }
        }
    }

    let report = TrainReport {
        rows,
        best_epoch,
        best_val_cider,
    };
    if let Some(path) = &config.log {
        std::fs::write(path, report.csv()).map_err(|e| HipError::io(path, e))?;
    }
    Ok(report)
}

/// Self-critical fine-tuning: per scene, the CIDEr-D advantage of a sampled
/// caption over the greedy caption weights the sampled caption's likelihood
/// gradient. Reports the mean greedy CIDEr-D on the training split after
/// every epoch.
pub fn train_scst(
    model: &Model,
    store: &mut ParamStore,
    train_set: &[SceneRecord],
    config: &TrainConfig,
    epochs: usize,
) -> Result<ScstReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(HipError::Input("training split is empty".into()));
    }
    if epochs == 0 {
        return Err(HipError::Config("epoch count must be at least 1".into()));
    }
    let refs = tokenized_references(train_set);
    let corpus = Corpus::from_references(&refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adam = AdamConfig::with_lr(config.scst_lr);

    let mut rows = Vec::with_capacity(epochs);
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=epochs {
        let start = Instant::now();
        indices.shuffle(&mut rng);
        let mut pseudo_acc = 0.0;
        let mut reward_acc = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            let batch: Vec<&SceneRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (pseudo, mean_reward) = scst_step(model, store, &batch, &corpus, &mut rng)?;
            store.fill_missing_grads();
            store.clip_grad_norm(config.clip_norm);
            adam_step(store, &adam)?;
            pseudo_acc += pseudo;
            reward_acc += mean_reward * batch.len() as f64;
            batches += 1;
        }
        let _ = batches;

        let candidates = decode_split(model, store, train_set, 1)?;
        let mut cider_acc = 0.0;
        for (cand, r) in candidates.iter().zip(&refs) {
            cider_acc += cider_d(cand, r, &corpus)?;
        }
        rows.push(ScstEpochRow {
            epoch,
            pseudo_loss: pseudo_acc,
            mean_reward: reward_acc / train_set.len() as f64,
            greedy_cider: cider_acc / train_set.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(ScstReport { rows })
}
