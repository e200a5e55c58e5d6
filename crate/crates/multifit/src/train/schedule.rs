//! One-cycle cosine learning-rate/momentum schedule and discriminative
//! per-group learning rates.

use crate::error::TrainError;

/// Shape of one training cycle. The learning rate climbs from
/// `lr_max/div_start` to `lr_max` over the warmup fraction, then anneals to
/// `lr_max/div_final`; momentum runs in anti-phase between `mom_max` and
/// `mom_min`.
#[derive(Clone, Copy, Debug)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub lr_max: f64,
    pub pct_warmup: f64,
    pub div_start: f64,
    pub div_final: f64,
    pub mom_max: f64,
    pub mom_min: f64,
}

impl ScheduleConfig {
    pub fn new(total_steps: usize, lr_max: f64) -> Self {
        ScheduleConfig {
            total_steps,
            lr_max,
            pct_warmup: 0.1,
            div_start: 25.0,
            div_final: 1e4,
            mom_max: 0.95,
            mom_min: 0.85,
        }
    }
}

/// Cosine interpolation from `a` (at u=0) to `b` (at u=1).
fn cosine_interp(a: f64, b: f64, u: f64) -> f64 {
    b + (a - b) * (1.0 + (std::f64::consts::PI * u).cos()) / 2.0
}

/// Learning rate and momentum at `step` (0 ..= total_steps).
pub fn one_cycle_cosine(step: usize, cfg: &ScheduleConfig) -> Result<(f64, f64), TrainError> {
    if step > cfg.total_steps {
        return Err(TrainError::StepOutOfRange { step, total: cfg.total_steps });
    }
    let peak = cfg.pct_warmup * cfg.total_steps as f64;
    let s = step as f64;
    let (lr, mom) = if s <= peak {
        let u = if peak > 0.0 { s / peak } else { 1.0 };
        (
            cosine_interp(cfg.lr_max / cfg.div_start, cfg.lr_max, u),
            cosine_interp(cfg.mom_max, cfg.mom_min, u),
        )
    } else {
        let u = (s - peak) / (cfg.total_steps as f64 - peak);
        (
            cosine_interp(cfg.lr_max, cfg.lr_max / cfg.div_final, u),
            cosine_interp(cfg.mom_min, cfg.mom_max, u),
        )
    };
    Ok((lr, mom))
}

/// Per-group learning rates for discriminative fine-tuning. Group 0 is the
/// deepest (embedding) group and gets the smallest rate; the last group is
/// the head and gets exactly `base_lr`.
pub fn discriminative_lr_groups(base_lr: f64, n_groups: usize, factor: f64) -> Vec<f64> {
    (0..n_groups)
        .map(|g| base_lr / factor.powi((n_groups - 1 - g) as i32))
        .collect()
}
