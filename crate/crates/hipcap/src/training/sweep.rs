//! Tree-threshold sweep: train one model per ε and report validation
//! quality, so the threshold's effect on the hierarchy can be charted.

use crate::data::SceneRecord;
use crate::error::{HipError, Result};
use crate::model::{Model, ModelConfig};
use crate::training::{train, TrainConfig};

/// Validation scores for one threshold value.
#[derive(Clone, Copy, Debug)]
pub struct SweepRow {
    pub epsilon: f64,
    pub cider_d: f64,
    pub bleu4: f64,
}

/// The default threshold grid.
pub const DEFAULT_EPSILON_GRID: [f64; 6] = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Trains a fresh model per ε (same seed, same data, ascending ε) and
/// records the best validation CIDEr-D and that epoch's BLEU@4.
pub fn sweep_epsilon(
    template: &ModelConfig,
    train_set: &[SceneRecord],
    val_set: &[SceneRecord],
    config: &TrainConfig,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(HipError::Input("threshold grid is empty".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(grid.len());
    for &epsilon in &grid {
        let mut model_config = template.clone();
        model_config.epsilon = epsilon;
        // No checkpoint/log side effects per cell; the sweep reports rows.
        let cell_config = TrainConfig {
            checkpoint: None,
            log: None,
            ..config.clone()
        };
        let (model, mut store) = Model::new(model_config, config.seed)?;
        let report = train(&model, &mut store, train_set, val_set, &cell_config)?;
        let best = &report.rows[report.best_epoch - 1];
        rows.push(SweepRow {
            epsilon,
            cider_d: best.val_cider,
            bleu4: best.val_bleu4,
        });
    }
    Ok(rows)
}

/// CSV rendering of sweep rows.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("epsilon,cider_d,bleu4\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.epsilon, r.cider_d, r.bleu4));
    }
    out
}
