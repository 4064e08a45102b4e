//! Training: MSE + L1/L2 loss assembly, Adam, the step-decay learning-rate
//! schedule, gradient clipping, early stopping on validation RMSE, and the
//! epoch loop.

mod adam;
mod fit;

pub use adam::{adam_step, AdamState};
pub use fit::{fit, predict_all, prepare_samples, FitResult, TrainSample, TrainStatus};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub initial_lr: f64,
    /// Epochs between halvings.
    pub decay_period: usize,
    pub decay_factor: f64,
    pub max_epochs: usize,
    /// Epochs without validation-RMSE improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub clip_norm: Option<f64>,
    pub l1: f64,
    pub l2: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            initial_lr: 1e-3,
            decay_period: 10,
            decay_factor: 2.0,
            max_epochs: 50,
            patience: 20,
            batch_size: 2,
            dropout_rate: 0.5,
            clip_norm: None,
            l1: 0.0,
            l2: 0.0,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience > self.max_epochs {
            return Err(Error::InvalidConfig(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        if self.initial_lr <= 0.0 || self.decay_factor <= 0.0 || self.decay_period == 0 {
            return Err(Error::InvalidConfig(
                "learning-rate schedule parameters must be positive".into(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::InvalidConfig(format!("clip_norm must be > 0, got {c}")));
            }
        }
        if self.l1 < 0.0 || self.l2 < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(
                "regularization coefficients must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// initial_lr * decay_factor^(-floor(epoch / decay_period)).
pub fn lr_at_epoch(config: &ExperimentConfig, epoch: usize) -> f64 {
    let halvings = (epoch / config.decay_period) as i32;
    config.initial_lr * config.decay_factor.powi(-halvings)
}

/// Scale all gradients by max_norm/||g|| when the global L2 norm exceeds
/// max_norm; otherwise leave them untouched (bit-identical). Returns the
/// pre-clip norm.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// mean((p - t)^2) + l1 * sum|w| + l2 * sum w^2 over the regularizable
/// parameters, assembled on the tape so gradients flow everywhere.
pub fn training_loss(
    g: &mut Graph,
    predictions: NodeId,
    targets: NodeId,
    reg_params: &[NodeId],
    l1: f64,
    l2: f64,
) -> Result<NodeId> {
    let diff = g.sub(predictions, targets)?;
    let sq = g.mul(diff, diff)?;
    let mut loss = g.mean_all(sq);
    if l1 > 0.0 {
        for &p in reg_params {
            let a = g.abs(p);
            let s = g.sum_all(a);
            let scaled = g.scale(s, l1);
            loss = g.add(loss, scaled)?;
        }
    }
    if l2 > 0.0 {
        for &p in reg_params {
            let sq = g.mul(p, p)?;
            let s = g.sum_all(sq);
            let scaled = g.scale(s, l2);
            loss = g.add(loss, scaled)?;
        }
    }
    Ok(loss)
}

/// Strict-improvement early stopping on validation RMSE.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
        }
    }

    /// Record one epoch's metric; returns (improved, should_stop).
    pub fn observe(&mut self, epoch: usize, val_rmse: f64) -> (bool, bool) {
        let improved = match self.best {
            None => true,
            Some((_, best)) => val_rmse < best,
        };
        if improved {
            self.best = Some((epoch, val_rmse));
        }
        let stop = match self.best {
            Some((best_epoch, _)) => epoch - best_epoch >= self.patience,
            None => false,
        };
        (improved, stop)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_value(&self) -> Option<f64> {
        self.best.map(|(_, v)| v)
    }
}

/// One epoch's record in the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_rmse: f64,
    pub val_loss: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.csv_string())?;
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,train_rmse,val_loss,val_rmse\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.lr, r.train_loss, r.train_rmse, r.val_loss, r.val_rmse
            ));
        }
        out
    }
}
