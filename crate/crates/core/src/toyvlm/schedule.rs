use crate::error::{invalid, Result};

use super::train::TrainConfig;

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then linear decay
/// to 0 at `total_steps`.
///
/// ```
/// use rsalign::toyvlm::{lr_at, TrainConfig};
///
/// let cfg = TrainConfig::default();
/// assert_eq!(lr_at(100, &cfg).unwrap(), 3e-4);
/// assert_eq!(lr_at(550, &cfg).unwrap(), 1.5e-4);
/// assert_eq!(lr_at(1000, &cfg).unwrap(), 0.0);
/// ```
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(invalid!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        ));
    }
    let frac = if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            1.0
        } else {
            step as f64 / cfg.warmup_steps as f64
        }
    } else {
        (cfg.total_steps - step) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64
    };
    Ok(cfg.peak_lr * frac)
}
