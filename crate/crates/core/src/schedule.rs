//! Learning-rate schedules for the training harness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate policy, evaluated per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Triangular one-cycle: linear `lo -> hi` over the first half of the
    /// cyclic phase, back down to `lo` over the second half, then a linear
    /// decay to `final_lr` over the trailing `final_fraction` of all steps.
    OneCycleTriangular {
        lo: f64,
        hi: f64,
        final_lr: f64,
        final_fraction: f64,
        total_epochs: usize,
    },
    /// Linear warmup from `base_lr` to `warmup_multiplier * base_lr` across
    /// `warmup_epochs`, then cosine decay to zero at `total_epochs`.
    CosineWithWarmup {
        base_lr: f64,
        warmup_epochs: usize,
        warmup_multiplier: f64,
        total_epochs: usize,
    },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant { lr } => {
                if lr <= 0.0 {
                    return Err(Error::Config(format!("constant lr must be > 0, got {lr}")));
                }
            }
            LrSchedule::OneCycleTriangular { lo, hi, final_lr, final_fraction, total_epochs } => {
                if lo <= 0.0 || hi <= 0.0 || final_lr <= 0.0 {
                    return Err(Error::Config("one-cycle rates must be > 0".into()));
                }
                if lo >= hi {
                    return Err(Error::Config(format!(
                        "one-cycle needs lo < hi, got lo = {lo}, hi = {hi}"
                    )));
                }
                if !(final_fraction > 0.0 && final_fraction < 1.0) {
                    return Err(Error::Config(format!(
                        "final_fraction must lie in (0, 1), got {final_fraction}"
                    )));
                }
                if total_epochs == 0 {
                    return Err(Error::Config("one-cycle needs total_epochs >= 1".into()));
                }
            }
            LrSchedule::CosineWithWarmup { base_lr, warmup_epochs, warmup_multiplier, total_epochs } => {
                if base_lr <= 0.0 || warmup_multiplier <= 0.0 {
                    return Err(Error::Config("cosine schedule rates must be > 0".into()));
                }
                if warmup_epochs >= total_epochs {
                    return Err(Error::Config(format!(
                        "warmup_epochs = {warmup_epochs} must be shorter than total_epochs = {total_epochs}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` (0-based).
    pub fn rate_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::OneCycleTriangular { lo, hi, final_lr, final_fraction, total_epochs } => {
                let total = (total_epochs * steps_per_epoch) as f64;
                let s = (step as f64).min(total);
                let tail_start = total * (1.0 - final_fraction);
                let half = tail_start / 2.0;
                if s < half {
                    lo + (hi - lo) * s / half
                } else if s < tail_start {
                    hi - (hi - lo) * (s - half) / (tail_start - half)
                } else if total > tail_start {
                    lo + (final_lr - lo) * (s - tail_start) / (total - tail_start)
                } else {
                    final_lr
                }
            }
            LrSchedule::CosineWithWarmup { base_lr, warmup_epochs, warmup_multiplier, total_epochs } => {
                let total = (total_epochs * steps_per_epoch) as f64;
                let warmup = (warmup_epochs * steps_per_epoch) as f64;
                let peak = base_lr * warmup_multiplier;
                let s = (step as f64).min(total);
                if s < warmup {
                    base_lr + (peak - base_lr) * s / warmup
                } else {
                    let t = if total > warmup { (s - warmup) / (total - warmup) } else { 1.0 };
                    peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
                }
            }
        }
    }
}
