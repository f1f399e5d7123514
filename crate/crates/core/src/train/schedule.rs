use alloc::format;

use super::config::{LrSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::math;

/// Number of warmup steps, `ceil(ratio * total)`.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    math::ceil(warmup_ratio * total_steps as f64) as usize
}

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total_steps`.
pub fn cosine_with_warmup(step: usize, total_steps: usize, peak: f64, warmup_ratio: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Contract(format!("step {step} beyond schedule of {total_steps} steps")));
    }
    let warm = warmup_steps(total_steps, warmup_ratio);
    if step < warm {
        return Ok(peak * step as f64 / warm as f64);
    }
    if warm == total_steps {
        return Ok(if step == 0 { 0.0 } else { peak });
    }
    let progress = (step - warm) as f64 / (total_steps - warm) as f64;
    Ok(peak * 0.5 * (1.0 + math::cos(core::f64::consts::PI * progress)))
}

/// Learning rate at `step` of `total_steps` for `config`.
pub fn lr_schedule(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    let peak = config.learning_rate();
    match config.schedule {
        LrSchedule::Cosine => cosine_with_warmup(step, total_steps, peak, config.warmup_ratio),
        LrSchedule::Constant => {
            if step > total_steps {
                return Err(Error::Contract(format!("step {step} beyond schedule of {total_steps} steps")));
            }
            Ok(peak)
        }
    }
}
