use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Linear warmup from zero followed by cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, min_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::config("optim.warmup_steps", "must be smaller than the total step count"));
        }
        if !(0.0 <= min_lr && min_lr <= base_lr) {
            return Err(Error::config("optim.min_lr", "must be in [0, base_lr]"));
        }
        Ok(Self {
            base_lr,
            min_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Self::new(cfg.optim.base_lr, cfg.optim.min_lr, cfg.optim.warmup_steps, cfg.train.steps)
    }

    /// Learning rate at `step ∈ [0, total_steps]`; training step `s` (1-based)
    /// uses `lr_at(s)`, so the last step runs at `min_lr`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let w = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Ok(self.min_lr * (1.0 - w) + self.base_lr * w)
    }
}
