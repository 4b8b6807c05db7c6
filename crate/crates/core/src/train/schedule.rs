use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: usize,
    /// Linear ramp from 0 to `lr_start` over this many steps.
    #[serde(default)]
    pub warmup_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { lr_start: 0.1, lr_end: 1e-5, total_steps: 1, warmup_steps: 0 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start >= self.lr_end && self.lr_end >= 0.0 && self.lr_start.is_finite()) {
            return Err(Error::Config(format!(
                "schedule: need lr_start >= lr_end >= 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.total_steps == 0 || (self.warmup_steps > 0 && self.warmup_steps >= self.total_steps) {
            return Err(Error::Config(format!(
                "schedule: total_steps {} must be positive and exceed warmup_steps {}",
                self.total_steps, self.warmup_steps
            )));
        }
        Ok(())
    }
}

/// Half-cosine decay from `lr_start` at step 0 to `lr_end` at `total_steps`.
/// Written as a convex combination so both endpoints are exact.
pub fn cosine_lr(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if step > cfg.total_steps {
        return Err(Error::Invalid(format!("step {step} outside schedule [0, {}]", cfg.total_steps)));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr_start * step as f64 / cfg.warmup_steps as f64);
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let t = (step - cfg.warmup_steps) as f64 / span;
    let w = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    Ok(cfg.lr_start * w + cfg.lr_end * (1.0 - w))
}
