//! AdamW, cosine learning-rate annealing and early stopping.

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightDecay {
    None,
    /// L2 penalty folded into the gradient (classic Adam).
    Coupled(f64),
    /// Decay applied directly to the parameters (AdamW).
    Decoupled(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: WeightDecay,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: WeightDecay::Decoupled(0.0),
        }
    }
}

impl AdamConfig {
    pub fn adamw(weight_decay: f64) -> Self {
        AdamConfig {
            weight_decay: WeightDecay::Decoupled(weight_decay),
            ..Default::default()
        }
    }
}

/// Optimizer state: step counter and per-parameter moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let g = &grads[idx];
            if g.len() != p.len() {
                return Err(Error::Shape(format!("gradient {idx} has wrong length")));
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for j in 0..p.len() {
                let mut gj = g[j];
                match weight_decay {
                    WeightDecay::Coupled(wd) => gj += wd * p[j],
                    WeightDecay::Decoupled(wd) => p[j] *= 1.0 - lr * wd,
                    WeightDecay::None => {}
                }
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Domain("cosine schedule with zero total steps".into()));
    }
    let frac = step.min(total) as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without improving on the best
/// validation loss by more than `1e-6`.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub epochs_without_improvement: usize,
}

pub const MIN_IMPROVEMENT: f64 = 1e-6;

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            epochs_without_improvement: 0,
        }
    }

    /// Returns whether the epoch improved and whether to keep going.
    pub fn observe(&mut self, val_loss: f64) -> (bool, StopDecision) {
        let improved = val_loss < self.best - MIN_IMPROVEMENT;
        if improved {
            self.best = val_loss;
            self.epochs_without_improvement = 0;
        } else {
            self.epochs_without_improvement += 1;
        }
        let decision = if self.epochs_without_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        (improved, decision)
    }
}
