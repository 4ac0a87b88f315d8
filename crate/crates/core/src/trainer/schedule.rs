use std::f64::consts::PI;

use super::{TrainConfig, TrainError};

/// Linear warmup to `max_lr`, then half-cosine decay to exactly zero at
/// `total_steps`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if step > cfg.total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: cfg.total_steps,
        });
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.max_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    Ok(cfg.max_lr * 0.5 * (1.0 + (PI * progress).cos()))
}
