//! Learning-rate schedules: step halving and polynomial decay.

use crate::error::{Error, Result};

/// Polynomial decay `base * (1 - i/E)^power`.
pub fn poly_lr(epoch: usize, max_epoch: usize, base: f64, power: f64) -> Result<f64> {
    if max_epoch == 0 {
        return Err(Error::domain("poly schedule needs max_epoch >= 1"));
    }
    if epoch > max_epoch {
        return Err(Error::domain(format!(
            "epoch {epoch} outside [0, {max_epoch}]"
        )));
    }
    Ok(base * (1.0 - epoch as f64 / max_epoch as f64).powf(power))
}

/// Step decay `initial * 0.5^(epoch / halve_every)`.
pub fn step_lr(epoch: usize, initial: f64, halve_every: usize) -> f64 {
    debug_assert!(halve_every >= 1);
    initial * 0.5f64.powi((epoch / halve_every.max(1)) as i32)
}

/// A training run's learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleSpec {
    StepHalving { initial_lr: f64, halve_every: usize },
    Poly { base_lr: f64, max_epoch: usize, power: f64 },
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ScheduleSpec::StepHalving {
                initial_lr,
                halve_every,
            } => {
                if *initial_lr <= 0.0 {
                    return Err(Error::config("initial_lr must be > 0"));
                }
                if *halve_every < 1 {
                    return Err(Error::config("halve_every must be >= 1"));
                }
            }
            ScheduleSpec::Poly {
                base_lr,
                max_epoch,
                power,
            } => {
                if *base_lr <= 0.0 {
                    return Err(Error::config("base_lr must be > 0"));
                }
                if *max_epoch < 1 {
                    return Err(Error::config("max_epoch must be >= 1"));
                }
                if *power <= 0.0 {
                    return Err(Error::config("power must be > 0"));
                }
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        match self {
            ScheduleSpec::StepHalving {
                initial_lr,
                halve_every,
            } => Ok(step_lr(epoch, *initial_lr, *halve_every)),
            ScheduleSpec::Poly {
                base_lr,
                max_epoch,
                power,
            } => poly_lr(epoch.min(*max_epoch), *max_epoch, *base_lr, *power),
        }
    }
}
