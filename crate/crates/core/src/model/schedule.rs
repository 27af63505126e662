use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    WarmupCosine,
    WarmupCosineAnnealing,
    WarmupConstant,
}

/// Learning-rate schedule with linear warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub max_lr: f64,
    pub warmup: u32,
    pub total: u32,
    /// Restart period of the annealing variant, counted after warm-up.
    #[serde(default)]
    pub period: u32,
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            kind: ScheduleKind::WarmupConstant,
            max_lr: lr,
            warmup: 0,
            total: u32::MAX,
            period: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return Err(ModelError::Config(format!(
                "max lr {} must be finite and non-negative",
                self.max_lr
            )));
        }
        if self.warmup > self.total {
            return Err(ModelError::Config(format!(
                "warm-up {} exceeds total rounds {}",
                self.warmup, self.total
            )));
        }
        if self.kind == ScheduleKind::WarmupCosineAnnealing && self.period == 0 {
            return Err(ModelError::Config(
                "cosine annealing needs a positive period".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate at `round`, for `0 <= round <= total`.
    pub fn lr_at(&self, round: u32) -> Result<f64, ModelError> {
        if round > self.total {
            return Err(ModelError::Config(format!(
                "round {round} outside schedule range 0..={}",
                self.total
            )));
        }
        if round < self.warmup {
            return Ok(self.max_lr * f64::from(round) / f64::from(self.warmup));
        }
        let t = f64::from(round - self.warmup);
        let lr = match self.kind {
            ScheduleKind::WarmupConstant => self.max_lr,
            ScheduleKind::WarmupCosine => {
                let span = f64::from(self.total - self.warmup);
                if span == 0.0 {
                    self.max_lr
                } else {
                    self.max_lr * 0.5 * (1.0 + (PI * t / span).cos())
                }
            }
            ScheduleKind::WarmupCosineAnnealing => {
                let period = f64::from(self.period);
                self.max_lr * 0.5 * (1.0 + (PI * (t % period) / period).cos())
            }
        };
        Ok(lr.max(0.0))
    }
}
