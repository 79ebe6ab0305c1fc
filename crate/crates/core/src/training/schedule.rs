use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{HrstError, Result};

/// Linear warmup followed by cosine decay, evaluated per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    pub min_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            warmup_epochs: 50,
            total_epochs: 300,
            steps_per_epoch: 1,
            min_lr: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(HrstError::Config(format!(
                "base_lr must be > 0, got {}",
                self.base_lr
            )));
        }
        if !(0.0..=self.base_lr).contains(&self.min_lr) {
            return Err(HrstError::Config(format!(
                "min_lr {} must lie in [0, base_lr]",
                self.min_lr
            )));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(HrstError::Config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.steps_per_epoch == 0 || self.total_epochs == 0 {
            return Err(HrstError::Config(
                "steps_per_epoch and total_epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }
}

/// Learning rate at optimizer step `step` (0-based). Warmup ramps linearly so that the first
/// post-warmup step sees `base_lr`; decay reaches `min_lr` at step `total_steps − 1`.
pub fn lr_at(step: usize, s: &ScheduleConfig) -> f64 {
    let warm = s.warmup_steps();
    if step < warm {
        return s.base_lr * step as f64 / warm as f64;
    }
    let last = s.total_steps().saturating_sub(1);
    if last <= warm {
        return s.base_lr;
    }
    let t = ((step - warm) as f64 / (last - warm) as f64).min(1.0);
    s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + (PI * t).cos())
}
