//! AdamW with a warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ToyError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub total_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { max_lr: 1e-2, beta1: 0.9, beta2: 0.95, weight_decay: 0.05, eps: 1e-8, batch_size: 32, total_steps: 300 }
    }
}

impl OptimizerConfig {
    /// Same schedule shape with the peak learning rate halved.
    pub fn half_lr(self) -> Self {
        Self { max_lr: self.max_lr / 2.0, ..self }
    }

    pub fn min_lr(&self) -> f64 {
        0.1 * self.max_lr
    }

    /// `max(100, ceil(0.01 * total_steps))`.
    pub fn warmup_steps(&self) -> usize {
        100usize.max((self.total_steps as f64 * 0.01).ceil() as usize)
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |msg: &str| Err(ToyError::InvalidConfig(msg.to_string()));
        if !(self.max_lr.is_finite() && self.max_lr >= 0.0) {
            return bad("max_lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// Learning rate at `step` (0 ≤ step ≤ total_steps): linear warmup from 0
/// to `max_lr`, then cosine decay to `0.1 * max_lr` at `total_steps`.
///
/// Runs shorter than the warmup never leave the linear ramp; a run whose
/// length equals the warmup ends at `max_lr`.
pub fn lr_schedule(step: usize, cfg: &OptimizerConfig) -> Result<f64, ToyError> {
    if step > cfg.total_steps {
        return Err(ToyError::StepOutOfRange { step, total: cfg.total_steps });
    }
    let warmup = cfg.warmup_steps();
    if step < warmup {
        return Ok(cfg.max_lr * step as f64 / warmup as f64);
    }
    if cfg.total_steps <= warmup {
        return Ok(cfg.max_lr);
    }
    let progress = (step - warmup) as f64 / (cfg.total_steps - warmup) as f64;
    let min_lr = cfg.min_lr();
    Ok(min_lr + 0.5 * (cfg.max_lr - min_lr) * (1.0 + (PI * progress).cos()))
}

/// Adam moments for a flat parameter vector, with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, n_params: usize) -> Self {
        Self { cfg, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let OptimizerConfig { beta1, beta2, eps, weight_decay, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * params[i]);
        }
    }
}
