use serde::{Deserialize, Serialize};

use super::error::{DiffError, Result};
use super::param::{ParamId, ParamStore};

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DiffError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) || !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

/// One AdamW update over `ids`. Frozen parameters are skipped and left
/// bitwise untouched; trainable ones must carry a gradient. Gradients of the
/// updated parameters are cleared afterwards.
pub fn adamw_step(store: &mut ParamStore, ids: &[ParamId], cfg: &OptimConfig) -> Result<()> {
    cfg.validate()?;
    for &id in ids {
        let p = store.get(id);
        if p.trainable() && p.grad().is_none() {
            return Err(DiffError::MissingGrad {
                name: p.name().to_string(),
            });
        }
    }
    for &id in ids {
        let param = store.get_mut(id);
        if !param.trainable() {
            continue;
        }
        let (tensor, state) = param.parts_mut();
        let grad = tensor.take_grad().expect("checked above");
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
        for (j, w) in tensor.values_mut().iter_mut().enumerate() {
            let g = grad[j];
            state.m[j] = cfg.beta1 * state.m[j] + (1.0 - cfg.beta1) * g;
            state.v[j] = cfg.beta2 * state.v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = state.m[j] / bc1;
            let v_hat = state.v[j] / bc2;
            *w = *w * decay - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Steps every parameter in the store (frozen ones are skipped).
pub fn adamw_step_all(store: &mut ParamStore, cfg: &OptimConfig) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().collect();
    adamw_step(store, &ids, cfg)
}
