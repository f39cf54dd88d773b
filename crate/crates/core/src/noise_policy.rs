//! When and how strongly tempering noise is applied during training.
//!
//! There is no phase state machine: the noise magnitude follows the
//! quantization error alone, and the optional learning-rate coupling is the
//! only explicit schedule.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::noise_magnitude_scalar;

pub const DEFAULT_NOISE_SCALE: f64 = 0.2;
pub const DEFAULT_DECAY_RATE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePolicy {
    pub c: f64,
    pub k: f64,
    /// Scale noise by `lr_now / lr_init`.
    pub lr_coupling: bool,
    pub enabled: bool,
    pub apply_to_activations: bool,
}

impl Default for NoisePolicy {
    fn default() -> Self {
        Self {
            c: DEFAULT_NOISE_SCALE,
            k: DEFAULT_DECAY_RATE,
            lr_coupling: true,
            enabled: true,
            apply_to_activations: false,
        }
    }
}

impl NoisePolicy {
    /// The learned-step-size baseline: tempering with zero noise level.
    pub fn lsq() -> Self {
        Self {
            c: 0.0,
            ..Self::default()
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// True when tempering can inject any noise at all.
    pub fn is_active(&self) -> bool {
        self.enabled && self.c > 0.0
    }

    /// Multiplier fed to the tempered quantizer at the current learning rate.
    pub fn policy_scale(&self, lr_now: f64, lr_init: f64) -> Result<f64> {
        if !(lr_init > 0.0) {
            return Err(Error::Param(format!("initial learning rate must be > 0, got {lr_init}")));
        }
        if !(lr_now >= 0.0) {
            return Err(Error::Param(format!("learning rate must be >= 0, got {lr_now}")));
        }
        Ok(match (self.enabled, self.lr_coupling) {
            (false, _) => 0.0,
            (true, false) => 1.0,
            (true, true) => lr_now / lr_init,
        })
    }
}

/// `y(x) = (x + c * exp(-k x) * sqrt(x)) / x`: one noise standard deviation
/// relative to the quantization error it rides on.
pub fn noise_to_error_ratio_curve(c: f64, k: f64, err_grid: &[f64]) -> Result<Vec<f64>> {
    err_grid
        .iter()
        .map(|&x| {
            if !(x > 0.0) {
                Err(Error::Param(format!("error grid values must be > 0, got {x}")))
            } else {
                Ok((x + noise_magnitude_scalar(x, c, k)) / x)
            }
        })
        .collect()
}

/// Log-spaced grid of `points` values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Writes the ratio curve as a two-column `err,ratio` CSV.
pub fn write_ratio_curve_csv(mut out: impl Write, c: f64, k: f64, err_grid: &[f64]) -> Result<()> {
    let ratios = noise_to_error_ratio_curve(c, k, err_grid)?;
    writeln!(out, "err,ratio")?;
    for (x, y) in err_grid.iter().zip(ratios) {
        writeln!(out, "{x:e},{y:e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_scale_examples() {
        let mut p = NoisePolicy {
            lr_coupling: false,
            ..NoisePolicy::default()
        };
        assert_eq!(p.policy_scale(0.003, 0.01).unwrap(), 1.0);
        p.lr_coupling = true;
        assert_eq!(p.policy_scale(0.01, 0.01).unwrap(), 1.0);
        assert!((p.policy_scale(0.001, 0.01).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(NoisePolicy::disabled().policy_scale(0.01, 0.01).unwrap(), 0.0);
        assert!(p.policy_scale(0.01, 0.0).is_err());
        assert!(p.policy_scale(-1.0, 0.1).is_err());
    }

    #[test]
    fn ratio_curve_examples() {
        let y = noise_to_error_ratio_curve(0.2, 50.0, &[0.01, 0.2]).unwrap();
        assert!((y[0] - (1.0 + 0.2 * (-0.5f64).exp() * 0.1 / 0.01)).abs() < 1e-12);
        assert!((y[0] - 2.2131).abs() < 1e-4);
        // 1 + e^-10 * sqrt(0.2) = 1.0000203
        assert!((y[1] - (1.0 + (-10f64).exp() * 0.2f64.sqrt())).abs() < 1e-12);
        assert!(y[1] < 1.001);
        let flat = noise_to_error_ratio_curve(0.0, 50.0, &[1e-4, 0.01, 1.0]).unwrap();
        assert!(flat.iter().all(|&v| v == 1.0));
        assert!(noise_to_error_ratio_curve(0.2, 50.0, &[0.0]).is_err());
    }

    #[test]
    fn ratio_curve_decreases_past_the_noise_peak() {
        let k = 50.0;
        let grid = log_grid(1.0 / (2.0 * k), 1.0, 500);
        let y = noise_to_error_ratio_curve(0.2, k, &grid).unwrap();
        assert!(y.windows(2).all(|w| w[1] <= w[0]));
        // Above ~0.09 the noise adds under 1% of the error.
        let tail = noise_to_error_ratio_curve(0.2, k, &log_grid(0.09, 1.0, 100)).unwrap();
        assert!(tail.iter().all(|&v| v < 1.01));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut buf = Vec::new();
        write_ratio_curve_csv(&mut buf, 0.2, 50.0, &[0.01, 0.02]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "err,ratio");
        assert_eq!(lines.len(), 3);
    }
}
