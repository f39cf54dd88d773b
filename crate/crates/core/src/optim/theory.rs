//! Monte-Carlo and algebraic validators for the noise behaviour of SGD.

use super::momentum_update;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::quantizer::{quantize, quantize_tempered, QuantizerState};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Variance amplification of i.i.d. gradient noise accumulated with
/// momentum `m`: `1 / (1 - m^2)`.
pub fn momentum_variance_factor(m: f64) -> f64 {
    1.0 / (1.0 - m * m)
}

/// Synthetic stand-in for mini-batch gradient noise: per-coordinate standard
/// deviations plus the learning-rate / batch-size temperature bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedNoiseModel {
    pub noise_std: Vec<f64>,
    pub lr: f64,
    pub batch_size: usize,
}

impl SimulatedNoiseModel {
    /// `T = lr / B`.
    pub fn temperature(&self) -> f64 {
        self.lr / self.batch_size as f64
    }

    pub fn sample(&self, rng: &mut RandomSource) -> Vec<f64> {
        self.noise_std.iter().map(|s| s * rng.normal()).collect()
    }

    /// A clean gradient plus one noise draw.
    pub fn noisy_gradient(&self, clean: &[f64], rng: &mut RandomSource) -> Result<Vec<f64>> {
        if clean.len() != self.noise_std.len() {
            return Err(Error::Shape {
                op: "noisy_gradient",
                lhs: vec![clean.len()],
                rhs: vec![self.noise_std.len()],
            });
        }
        Ok(clean
            .iter()
            .zip(self.sample(rng))
            .map(|(g, e)| g + e)
            .collect())
    }
}

/// Empirical variance of the gap between momentum accumulations of noisy
/// and clean gradients.
///
/// Both accumulators run the optimizer's own momentum recurrence for
/// `steps + 1` updates on a fixed clean gradient; the noisy one adds
/// unit-variance Gaussian noise each step. With unit noise variance the
/// returned value is directly the amplification ratio, which should
/// approach `1 / (1 - m^2)`.
pub fn momentum_noise_variance_mc(m: f64, steps: usize, draws: usize, rng: &mut RandomSource) -> Result<f64> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Param(format!("momentum must be in [0, 1), got {m}")));
    }
    if m.powi(2 * steps as i32) >= 1e-4 {
        return Err(Error::Param(format!(
            "{steps} steps leave m^(2T) = {:e} >= 1e-4; accumulation has not converged",
            m.powi(2 * steps as i32)
        )));
    }
    if draws < 2 {
        return Err(Error::Param("need at least two draws".into()));
    }
    const CLEAN_GRAD: f64 = 1.0;
    let mut gaps = Vec::with_capacity(draws);
    for _ in 0..draws {
        let (mut clean, mut noisy) = (0.0, 0.0);
        for _ in 0..=steps {
            clean = momentum_update(clean, CLEAN_GRAD, m);
            noisy = momentum_update(noisy, CLEAN_GRAD + rng.normal(), m);
        }
        gaps.push(noisy - clean);
    }
    let mean = gaps.iter().sum::<f64>() / draws as f64;
    let var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / (draws - 1) as f64;
    Ok(var)
}

/// Max deviation between the gradient at the tempered point and its
/// first-order expansion around the plain quantized point, for the
/// quadratic loss `L(x) = x^T H x / 2`.
///
/// Gradients come from the tape; the expansion adds `H (Q~ - Q)` to the
/// tape gradient at `Q`. For a quadratic loss the expansion is exact, so the
/// result should be at rounding level.
pub fn taylor_equivalence_check(
    hessian: &Tensor,
    w: &Tensor,
    q: &QuantizerState,
    draws: usize,
    rng: &mut RandomSource,
) -> Result<f64> {
    let d = w.len();
    if hessian.shape() != [d, d] {
        return Err(Error::Shape {
            op: "taylor_equivalence_check",
            lhs: hessian.shape().to_vec(),
            rhs: vec![d, d],
        });
    }
    for i in 0..d {
        for j in 0..i {
            if hessian.data()[i * d + j] != hessian.data()[j * d + i] {
                return Err(Error::Param(format!("Hessian is not symmetric at ({i}, {j})")));
            }
        }
    }
    let column = w.clone().reshape(&[d, 1])?;
    let quadratic_grad = |x: &Tensor| -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let hx = tape.constant(hessian.clone()).matmul(xv)?;
        let loss = xv.mul(hx)?.sum().scale(0.5);
        Ok(tape.backward(loss)?.wrt(xv).clone())
    };
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let tape = Tape::new();
        let wv = tape.constant(column.clone());
        let s = tape.constant(Tensor::scalar(q.step_size));
        let plain = quantize(wv, s, q)?.value();
        let tempered = quantize_tempered(wv, s, q, rng, 1.0)?.value();
        let at_tempered = quadratic_grad(&tempered)?;
        let at_plain = quadratic_grad(&plain)?;
        let shift = tempered.zip_map(&plain, |a, b| a - b)?;
        let predicted = at_plain.zip_map(&hessian.matmul(&shift)?, |a, b| a + b)?;
        for (a, b) in at_tempered.data().iter().zip(predicted.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn variance_factor_values() {
        assert_eq!(momentum_variance_factor(0.0), 1.0);
        assert!((momentum_variance_factor(0.9) - 5.263_157_894_736_842).abs() < 1e-12);
    }

    #[test]
    fn mc_without_momentum_is_unit_variance() {
        let mut rng = RandomSource::derive(1, &[stream::MONTE_CARLO]);
        let r = momentum_noise_variance_mc(0.0, 10, 20_000, &mut rng).unwrap();
        assert!((r - 1.0).abs() < 0.05);
    }

    #[test]
    fn mc_rejects_unconverged_horizon() {
        let mut rng = RandomSource::new(0);
        assert!(momentum_noise_variance_mc(0.9, 10, 100, &mut rng).is_err());
        assert!(momentum_noise_variance_mc(1.0, 1000, 100, &mut rng).is_err());
        assert!(momentum_noise_variance_mc(0.0, 0, 100, &mut rng).is_err());
    }

    #[test]
    fn temperature_halves_when_batch_doubles() {
        let a = SimulatedNoiseModel {
            noise_std: vec![1.0],
            lr: 0.1,
            batch_size: 64,
        };
        let b = SimulatedNoiseModel {
            batch_size: 128,
            ..a.clone()
        };
        assert_eq!(b.temperature(), a.temperature() / 2.0);
    }

    #[test]
    fn simulated_noise_moments() {
        let model = SimulatedNoiseModel {
            noise_std: vec![0.5, 2.0],
            lr: 0.1,
            batch_size: 32,
        };
        let mut rng = RandomSource::new(4);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let e = model.sample(&mut rng);
            for i in 0..2 {
                sum[i] += e[i];
                sq[i] += e[i] * e[i];
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let std = (sq[i] / n as f64 - mean * mean).sqrt();
            assert!(mean.abs() < 4.0 * model.noise_std[i] / (n as f64).sqrt());
            assert!((std / model.noise_std[i] - 1.0).abs() < 0.01);
        }
        assert!(model.noisy_gradient(&[1.0], &mut rng).is_err());
    }

    #[test]
    fn taylor_check_identity_and_zero_noise() {
        let q = QuantizerState::new(2, true, 0.1)
            .unwrap()
            .with_noise(0.2, 50.0)
            .unwrap();
        let w = Tensor::from_vec(vec![0.37, -0.25]);
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut rng = RandomSource::new(2);
        assert!(taylor_equivalence_check(&eye, &w, &q, 100, &mut rng).unwrap() <= 1e-6);

        let silent = q.with_noise(0.0, 50.0).unwrap();
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 4.0]]).unwrap();
        assert_eq!(taylor_equivalence_check(&h, &w, &silent, 50, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn taylor_check_rejects_asymmetric_hessian() {
        let q = QuantizerState::new(2, true, 0.1).unwrap();
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let mut rng = RandomSource::new(0);
        assert!(matches!(
            taylor_equivalence_check(&h, &Tensor::zeros(&[2]), &q, 1, &mut rng),
            Err(Error::Param(_))
        ));
    }
}
