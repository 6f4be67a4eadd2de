//! AdamW with decoupled weight decay and a reduce-on-plateau learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use super::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update of a flat parameter block; `step` is the post-increment
/// step count (1 on the first update).
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
    }
}

/// Moments for every tensor of a [`ModelParams`], in tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ModelParams, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            lr: config.lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Applies one AdamW step. Tensors flagged in `frozen` (tensor order) are
/// left untouched, moments included.
pub fn adamw_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimState, frozen: &[bool]) {
    state.step += 1;
    let lr = state.lr;
    let cfg = state.config;
    let step = state.step;
    for (i, (theta, (_, g))) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
        if frozen.get(i).copied().unwrap_or(false) {
            continue;
        }
        adamw_update(theta.data_mut(), g.data(), &mut state.m[i], &mut state.v[i], step, lr, &cfg);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 5,
            factor: 0.1,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauState {
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_delta: f64,
    pub current_lr: f64,
}

impl PlateauState {
    pub fn new(initial_lr: f64, config: PlateauConfig) -> Self {
        assert!(config.factor > 0.0 && config.factor < 1.0, "factor must be in (0, 1)");
        assert!(config.patience >= 1, "patience must be >= 1");
        Self {
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            patience: config.patience,
            factor: config.factor,
            min_delta: config.min_delta,
            current_lr: initial_lr,
        }
    }

    /// Records one validation loss; returns true when the rate was reduced.
    pub fn step(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best_val_loss - self.min_delta {
            self.best_val_loss = val_loss;
            self.epochs_since_improvement = 0;
            return false;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement > self.patience {
            self.current_lr *= self.factor;
            self.epochs_since_improvement = 0;
            return true;
        }
        false
    }
}
