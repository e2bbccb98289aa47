//! Learning-rate schedule: linear warmup from the floor to the peak over the
//! first `warmup_fraction` of the run, then cosine decay back to the floor.
//!
//! `step` counts micro-steps (accumulation iterations), matching the training
//! budget in `total_steps`; with accumulation the rate is re-evaluated once
//! per weight update at the span's first micro-step.

use super::TrainConfig;
use crate::error::{Error, Result};

pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::invalid(format!(
            "lr_at: step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    let floor = cfg.lr_peak * cfg.lr_floor_factor;
    let warmup = (cfg.warmup_fraction * cfg.total_steps as f64).round() as usize;
    if step <= warmup {
        if warmup == 0 {
            return Ok(cfg.lr_peak);
        }
        return Ok(floor + (cfg.lr_peak - floor) * step as f64 / warmup as f64);
    }
    let span = (cfg.total_steps - warmup) as f64;
    let progress = (step - warmup) as f64 / span;
    Ok(floor
        + (cfg.lr_peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
