//! Optimization loop, learning-rate schedule, cross-validation and the
//! module ablation runner.

mod ablation;
mod cv;
mod log;
mod train;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ablation::{run_ablation, AblationRow, AblationTable, TABLE_ROWS};
pub use cv::{leakage_audit, run_cross_validation, CvOutcome, FoldSamples};
pub use log::{LogEntry, RunLog};
pub use train::{
    evaluate, make_batch, predict, restore, snapshot, train_fold, Batch, FoldOutcome,
    StepResult, Trainer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    PerEpoch,
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub family: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            family: "adamw".into(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub device: String,
    pub deterministic: bool,
    pub schedule: Schedule,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Validate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            base_lr: 1e-3,
            poly_power: 0.9,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            device: "cpu".into(),
            deterministic: true,
            schedule: Schedule::PerEpoch,
            max_steps: None,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// 60 full-batch steps over eight phantoms.
    pub fn tiny() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            base_lr: 3e-3,
            schedule: Schedule::PerStep,
            eval_every: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("train.base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.poly_power >= 0.0) {
            return Err(Error::Config("train.poly_power must be non-negative".into()));
        }
        if self.optimizer.family.to_ascii_lowercase() != "adamw" {
            return Err(Error::Config(format!(
                "unsupported optimizer '{}' (only adamw)",
                self.optimizer.family
            )));
        }
        self.device()?;
        Ok(())
    }

    pub fn device(&self) -> Result<Device> {
        match self.device.as_str() {
            "cpu" => Ok(Device::Cpu),
            other => Err(Error::Config(format!(
                "device '{other}' is not available in this build (use cpu)"
            ))),
        }
    }
}

/// `base_lr · (1 − t)^power`, with `t` clamped to `[0, 1]`.
pub fn poly_lr(t: f64, base_lr: f64, power: f64) -> f64 {
    let t = if (0.0..=1.0).contains(&t) {
        t
    } else {
        ::log::warn!("schedule progress {t} outside [0, 1]; clamped");
        t.clamp(0.0, 1.0)
    };
    base_lr * (1.0 - t).powf(power)
}
