//! Adam with bias correction and L2 weight decay folded into the gradient.

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

/// Adam hyperparameters. Defaults follow the training recipe used by the
/// pipelines: lr 5e-5, weight decay 1e-3, betas (0.9, 0.999), eps 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// One Adam update over every parameter in the set. The L2 term
/// `weight_decay * param` is added to the gradient before the moment
/// updates; gradients are zeroed afterwards and step counts incremented.
pub fn adam_step(params: &mut ParamSet, cfg: &AdamConfig) -> Result<()> {
    if cfg.lr < 0.0 {
        return Err(Error::Config(format!(
            "learning rate must be nonnegative, got {}",
            cfg.lr
        )));
    }
    for p in params.iter_mut() {
        p.steps += 1;
        let t = p.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..p.grad.len() {
            let g = p.grad[i] + cfg.weight_decay * p.value.values()[i];
            p.adam_m[i] = cfg.beta1 * p.adam_m[i] + (1.0 - cfg.beta1) * g;
            p.adam_v[i] = cfg.beta2 * p.adam_v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = p.adam_m[i] / bc1;
            let v_hat = p.adam_v[i] / bc2;
            p.value.values_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            p.grad[i] = 0.0;
        }
    }
    Ok(())
}
