//! Adam with bias-corrected moment estimates.

use crate::error::{HipError, Result};
use crate::numerics::tensor::ParamStore;

/// Optimizer hyperparameters. Defaults follow the usual published choice.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// Applies one Adam update to every parameter in the store.
///
/// Every parameter must carry an accumulated gradient; a missing gradient is
/// reported as a state error (it means some forward pass skipped a
/// parameter, which would silently freeze it). Gradients are cleared after
/// the update.
pub fn adam_step(store: &mut ParamStore, config: &AdamConfig) -> Result<()> {
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        let tensor = store.get(&name).expect("name from iterator");
        if tensor.grad().is_none() {
            return Err(HipError::State(format!(
                "adam step: parameter `{name}` has no accumulated gradient"
            )));
        }
    }
    let t = store.bump_step();
    let corr1 = 1.0 - config.beta1.powi(t as i32);
    let corr2 = 1.0 - config.beta2.powi(t as i32);
    for pos in 0..store.len() {
        let (_, tensor, m1, m2) = store.entry_mut(pos);
        let grad = tensor.grad().expect("checked above").to_vec();
        let values = tensor.values_mut();
        for i in 0..values.len() {
            let g = grad[i];
            m1[i] = config.beta1 * m1[i] + (1.0 - config.beta1) * g;
            m2[i] = config.beta2 * m2[i] + (1.0 - config.beta2) * g * g;
            let mhat = m1[i] / corr1;
            let vhat = m2[i] / corr2;
            values[i] -= config.lr * mhat / (vhat.sqrt() + config.eps);
        }
        tensor.clear_grad();
    }
    Ok(())
}
