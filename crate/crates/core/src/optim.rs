//! AdamW with decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{CtpError, Result};
use crate::model::{ModelConfig, Params, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epsilon: f64,
    /// When false, biases are excluded from weight decay.
    #[serde(default = "yes")]
    pub decay_biases: bool,
}

fn yes() -> bool {
    true
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, weight_decay: 0.1, clip_norm: 1.0, epsilon: 1e-8, decay_biases: true }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !beta_ok(self.beta1) || !beta_ok(self.beta2) {
            return Err(CtpError::InvalidSpec("betas must lie in [0, 1)".into()));
        }
        if !(self.clip_norm > 0.0) || !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(CtpError::InvalidSpec("need clip_norm > 0, epsilon > 0, weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Params,
    pub v: Params,
    pub t: u64,
}

impl OptimState {
    pub fn new(config: ModelConfig) -> Self {
        Self { m: Params::zeros(config), v: Params::zeros(config), t: 0 }
    }

    /// Zero moments and step count, keeping the shapes.
    pub fn reset(&mut self) {
        *self = Self::new(*self.m.config());
    }

    pub fn is_zero(&self) -> bool {
        self.t == 0 && self.m.as_slice().iter().chain(self.v.as_slice()).all(|&x| x == 0.0)
    }
}

/// Scales `grad` in place so its global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradient(grad: &mut [f64], clip_norm: f64) -> Result<f64> {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(CtpError::Numerical { index: 0, detail: format!("gradient norm {norm}") });
    }
    if norm > clip_norm {
        let scale = clip_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(norm)
}

/// One AdamW update of `params` with gradient `grad` at learning rate `lr`:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn adamw_step(state: &mut OptimState, params: &mut Params, grad: &Params, lr: f64, config: &OptimConfig) -> Result<()> {
    if params.config() != grad.config() || params.config() != state.m.config() {
        return Err(CtpError::ConfigMismatch("optimizer, parameter and gradient shapes differ".into()));
    }
    if !(lr >= 0.0) {
        return Err(CtpError::InvalidSpec(format!("learning rate {lr} must be >= 0")));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let cfg = *params.config();
    for tensor in Tensor::ALL {
        let range = cfg.range(tensor);
        let wd = if tensor.is_bias() && !config.decay_biases { 0.0 } else { config.weight_decay };
        let p = &mut params.as_mut_slice()[range.clone()];
        let g = &grad.as_slice()[range.clone()];
        let m = &mut state.m.as_mut_slice()[range.clone()];
        let v = &mut state.v.as_mut_slice()[range];
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + config.epsilon) + wd * *p);
        }
    }
    if !params.is_finite() {
        return Err(CtpError::Numerical { index: 0, detail: "non-finite parameter after AdamW step".into() });
    }
    Ok(())
}

/// Weight `beta^k` that moments accumulated before a data transition still carry
/// after `k` further steps.
pub fn moment_contribution(beta: f64, k: u32) -> f64 {
    beta.powi(k as i32)
}
