use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Constant,
    /// Cosine annealing without restarts, reaching zero at `total_epochs`.
    Cosine,
    /// Multiply by `step_factor` every `step_every` epochs.
    Step,
    /// Cosine envelope times the step-decay factor.
    CosineStep,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Step => "step",
            ScheduleKind::CosineStep => "cosine-step",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            "step" => Ok(Self::Step),
            "cosine-step" => Ok(Self::CosineStep),
            _ => Err(Error::Config(format!(
                "unknown schedule `{s}` (expected constant, cosine, step or cosine-step)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub initial_lr: f64,
    pub total_epochs: usize,
    pub step_every: usize,
    pub step_factor: f64,
}

impl LrSchedule {
    pub fn constant(initial_lr: f64, total_epochs: usize) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            initial_lr,
            total_epochs,
            step_every: 0,
            step_factor: 1.0,
        }
    }

    /// Learning rate at a (possibly fractional) epoch in `[0, total_epochs]`.
    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        if !(epoch >= 0.0 && epoch <= self.total_epochs as f64) {
            return Err(Error::Param(format!(
                "epoch {epoch} outside [0, {}]",
                self.total_epochs
            )));
        }
        let cosine = || {
            if self.total_epochs == 0 {
                1.0
            } else {
                0.5 * (1.0 + (PI * epoch / self.total_epochs as f64).cos())
            }
        };
        let step = || {
            if self.step_every == 0 {
                1.0
            } else {
                let drops = (epoch / self.step_every as f64).floor() as i32;
                self.step_factor.powi(drops)
            }
        };
        let factor = match self.kind {
            ScheduleKind::Constant => 1.0,
            ScheduleKind::Cosine => cosine(),
            ScheduleKind::Step => step(),
            ScheduleKind::CosineStep => cosine() * step(),
        };
        Ok((self.initial_lr * factor).max(0.0))
    }
}
