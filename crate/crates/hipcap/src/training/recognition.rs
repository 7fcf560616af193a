//! Multi-label recognition: a softmax head over a scene-level feature,
//! trained against the set of object classes present in the scene.
//!
//! Two feature sources are supported so the tree encoder can be compared
//! against a flat baseline: the encoder's image feature, or the plain mean
//! of the raw region features.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::SceneRecord;
use crate::encoder::{encode, TreeLstmParams};
use crate::error::{HipError, Result};
use crate::hierarchy::build_tree;
use crate::metrics::{multilabel_scores, MultiLabelScores};
use crate::numerics::{adam_step, AdamConfig, Graph, NodeId, ParamStore};

/// Which scene-level feature feeds the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecognitionInput {
    /// The tree encoder's root hidden state.
    ImageFeature,
    /// Mean of the raw region features (no encoder).
    MeanPooled,
}

/// A classification head, optionally behind the tree encoder.
pub struct RecognitionModel {
    pub input: RecognitionInput,
    pub classes: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub epsilon: f64,
    encoder: Option<TreeLstmParams>,
}

impl RecognitionModel {
    pub fn new(
        input: RecognitionInput,
        classes: usize,
        feature_dim: usize,
        hidden: usize,
        epsilon: f64,
        seed: u64,
    ) -> Result<(RecognitionModel, ParamStore)> {
        if classes == 0 {
            return Err(HipError::Config("need at least one label class".into()));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(HipError::Config(format!("epsilon must lie in [0, 1), got {epsilon}")));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (encoder, head_in) = match input {
            RecognitionInput::ImageFeature => (
                Some(TreeLstmParams::register(&mut store, &mut rng, "enc", feature_dim, hidden)?),
                hidden,
            ),
            RecognitionInput::MeanPooled => (None, feature_dim),
        };
        store.insert_xavier("rec.w", classes, head_in, &mut rng)?;
        store.insert_zero_vector("rec.b", classes)?;
        Ok((
            RecognitionModel {
                input,
                classes,
                feature_dim,
                hidden,
                epsilon,
                encoder,
            },
            store,
        ))
    }

    /// Class logits for one scene.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, record: &SceneRecord) -> Result<NodeId> {
        let regions = record.to_regions()?;
        let feature = match &self.encoder {
            Some(params) => {
                let tree = build_tree(&regions, self.epsilon)?;
                encode(g, store, params, &regions, &tree)?.image_feature
            }
            None => {
                let k = regions.len();
                let mut mean = vec![0.0; self.feature_dim];
                for r in &regions {
                    if r.region_feature.len() != self.feature_dim {
                        return Err(HipError::Dimension {
                            op: "recognition",
                            detail: format!(
                                "region feature of length {} where {} was configured",
                                r.region_feature.len(),
                                self.feature_dim
                            ),
                        });
                    }
                    for j in 0..self.feature_dim {
                        mean[j] += r.region_feature[j] / k as f64;
                    }
                }
                g.constant(&mean)
            }
        };
        let w = g.param(store, "rec.w")?;
        let b = g.param(store, "rec.b")?;
        g.affine(w, feature, Some(b))
    }
}

/// Multi-label softmax loss: −(1/|labels|) Σ_{k ∈ labels} log softmax(logits)_k.
/// Duplicate labels count once.
pub fn recognition_loss(g: &mut Graph, logits: NodeId, labels: &[usize], classes: usize) -> Result<NodeId> {
    let set: BTreeSet<usize> = labels.iter().copied().collect();
    if set.is_empty() {
        return Err(HipError::Input("label set is empty".into()));
    }
    if let Some(&bad) = set.iter().find(|&&k| k >= classes) {
        return Err(HipError::Input(format!(
            "label {bad} outside the {classes} configured classes"
        )));
    }
    if g.len_of(logits) != classes {
        return Err(HipError::Dimension {
            op: "recognition_loss",
            detail: format!("{} logits for {} classes", g.len_of(logits), classes),
        });
    }
    let log_probs = g.log_softmax(logits)?;
    let mut terms = Vec::with_capacity(set.len());
    for &k in &set {
        terms.push(g.slice(log_probs, k, 1)?);
    }
    let total = g.add(&terms)?;
    g.scale(total, -1.0 / set.len() as f64)
}

/// Indices of the k largest values, ranked by value (descending) with ties
/// broken toward the smaller index.
pub fn predict_top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Trains the head (and encoder, for the image-feature variant) on every
/// labeled scene; returns the per-epoch mean losses. Scenes without labels
/// are skipped.
pub fn train_recognition(
    model: &RecognitionModel,
    store: &mut ParamStore,
    records: &[SceneRecord],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    clip_norm: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if epochs == 0 || batch_size == 0 {
        return Err(HipError::Config("epochs and batch size must be at least 1".into()));
    }
    let labeled: Vec<&SceneRecord> = records.iter().filter(|r| r.labels.is_some()).collect();
    if labeled.is_empty() {
        return Err(HipError::Input("no labeled scenes to train on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adam = AdamConfig::with_lr(lr);
    let mut indices: Vec<usize> = (0..labeled.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        indices.shuffle(&mut rng);
        let mut acc = 0.0;
        for chunk in indices.chunks(batch_size) {
            let per_scene: Vec<Result<(f64, Vec<(String, Vec<f64>)>)>> = chunk
                .par_iter()
                .map(|&i| {
                    let record = labeled[i];
                    let mut g = Graph::new();
                    let logits = model.logits(&mut g, store, record)?;
                    let loss = recognition_loss(
                        &mut g,
                        logits,
                        record.labels.as_deref().expect("filtered to labeled"),
                        model.classes,
                    )?;
                    let grads = g.param_grads(loss)?;
                    Ok((g.value(loss)[0], grads))
                })
                .collect();
            let weight = 1.0 / chunk.len() as f64;
            for result in per_scene {
                let (value, grads) = result?;
                acc += value;
                for (name, grad) in grads {
                    let scaled: Vec<f64> = grad.iter().map(|v| v * weight).collect();
                    store.accumulate_grad(&name, &scaled)?;
                }
            }
            store.fill_missing_grads();
            store.clip_grad_norm(clip_norm);
            adam_step(store, &adam)?;
        }
        epoch_losses.push(acc / labeled.len() as f64);
    }
    Ok(epoch_losses)
}

/// Top-3 predictions on every labeled scene, scored with the six
/// multi-label metrics.
pub fn evaluate_recognition(
    model: &RecognitionModel,
    store: &ParamStore,
    records: &[SceneRecord],
) -> Result<MultiLabelScores> {
    let labeled: Vec<&SceneRecord> = records.iter().filter(|r| r.labels.is_some()).collect();
    if labeled.is_empty() {
        return Err(HipError::Input("no labeled scenes to evaluate".into()));
    }
    let predictions: Vec<Result<Vec<usize>>> = labeled
        .par_iter()
        .map(|record| {
            let mut g = Graph::new();
            let logits = model.logits(&mut g, store, record)?;
            Ok(predict_top_k(g.value(logits), 3))
        })
        .collect();
    let mut predicted = Vec::with_capacity(labeled.len());
    for p in predictions {
        predicted.push(p?);
    }
    let truth: Vec<Vec<usize>> = labeled
        .iter()
        .map(|r| r.labels.clone().expect("filtered to labeled"))
        .collect();
    multilabel_scores(&predicted, &truth, model.classes)
}
