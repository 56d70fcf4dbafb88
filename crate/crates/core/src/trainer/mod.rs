//! AdamW training with warmup/cosine or plateau schedules, per-epoch
//! re-clustering, early stopping, metrics and checkpoints.

mod optim;
mod train;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, optimizer_step, OptimizerState, ADAM_EPS, BETA1, BETA2};
pub use train::{
    cluster_hierarchy, eval_hierarchy, evaluate, evaluate_checkpoint, train, EvalMetrics, TrainData, TrainOptions,
    TrainOutcome,
};

use crate::cluster::ClusterConfig;
use crate::error::{Error, Result};
use crate::readout::{LossMode, LAMBDA_E, LAMBDA_F};

/// A validation metric must drop by more than this to count as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    /// Linear warmup, then cosine decay to zero at the last step.
    CosineWarmup,
    /// Linear warmup, then step decay on validation stagnation.
    Plateau,
}

impl FromStr for Scheduler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine_warmup" => Ok(Scheduler::CosineWarmup),
            "plateau" => Ok(Scheduler::Plateau),
            _ => Err(Error::Config(format!("unknown scheduler {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub scheduler: Scheduler,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub loss: LossMode,
    pub seeds: Vec<u64>,
    pub cluster: ClusterConfig,
    /// Optional global max-norm on trainable gradients.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 0.0,
            batch_size: 32,
            warmup_steps: 0,
            scheduler: Scheduler::Plateau,
            plateau_factor: 0.8,
            plateau_patience: 10,
            early_stop_patience: 50,
            max_epochs: 200,
            loss: LossMode::EnergyL1,
            seeds: vec![0, 1, 2],
            cluster: ClusterConfig::default(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be at least 1".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad(format!(
                "plateau_factor must lie in (0, 1], got {}",
                self.plateau_factor
            ));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.cluster.validate()
    }
}

/// Number of plateau reductions implied by a validation history: a reduction
/// fires each time `patience` consecutive epochs fail to improve on the best.
pub fn plateau_reductions(history: &[f64], patience: usize) -> usize {
    let mut best = f64::INFINITY;
    let mut bad = 0;
    let mut n = 0;
    for &m in history {
        if m < best - IMPROVEMENT_EPS {
            best = m;
            bad = 0;
        } else {
            bad += 1;
            if bad >= patience {
                n += 1;
                bad = 0;
            }
        }
    }
    n
}

/// Learning rate for optimizer step `step` (0-based) given the per-epoch
/// validation history so far. `total_steps` is the cosine horizon.
pub fn lr_at(step: usize, history: &[f64], cfg: &TrainConfig, total_steps: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    match cfg.scheduler {
        Scheduler::CosineWarmup => {
            let span = total_steps.saturating_sub(cfg.warmup_steps);
            if span == 0 {
                return cfg.lr;
            }
            let p = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        }
        Scheduler::Plateau => {
            let n = plateau_reductions(history, cfg.plateau_patience);
            cfg.lr * cfg.plateau_factor.powi(n as i32)
        }
    }
}

/// Validation metric driving scheduling and early stopping.
pub fn selection_metric(mode: LossMode, mae_e: f64, mae_f: Option<f64>) -> f64 {
    match (mode, mae_f) {
        (LossMode::EnergyForceMse, Some(f)) => LAMBDA_E * mae_e + LAMBDA_F * f,
        _ => mae_e,
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mae_e: f64,
    pub val_mae_f: Option<f64>,
    pub wall_time_s: f64,
}

impl EpochMetrics {
    /// Equality on everything but wall time, within `tol`.
    pub fn same_numbers(&self, other: &EpochMetrics, tol: f64) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= tol;
        self.epoch == other.epoch
            && close(self.lr, other.lr)
            && close(self.train_loss, other.train_loss)
            && close(self.val_mae_e, other.val_mae_e)
            && match (self.val_mae_f, other.val_mae_f) {
                (Some(a), Some(b)) => close(a, b),
                (None, None) => true,
                _ => false,
            }
    }
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::contract("mean of an empty list"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}
