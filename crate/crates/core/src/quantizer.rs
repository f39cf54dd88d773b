//! Learned-step-size uniform quantizer with quantization-error-aware noise
//! tempering.
//!
//! `Q(w) = round(clip(w / s, Q_L, Q_H)) * s`, built from tape primitives so
//! the reverse pass yields the straight-through weight gradient (1 inside
//! the clip range, 0 outside) and the learned step-size gradient
//! `round(w/s) - w/s` in range, `Q_L` / `Q_H` when clipped.
//!
//! The tempered quantizer adds `sg(c * exp(-k|Q(w)-w|) * sqrt(|Q(w)-w|) * eps)`
//! with fresh standard-normal `eps` per element and call. The curvature
//! scaling implied by the tempering temperature is never computed: injecting
//! the noise in the forward pass produces it through the loss's own
//! first-order response.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Smallest step size kept after an optimizer update.
pub const STEP_SIZE_FLOOR: f64 = 1e-8;

/// Per-module quantizer: learnable step size, integer code range and noise
/// hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub step_size: f64,
    pub bits: u32,
    pub q_low: i64,
    pub q_high: i64,
    /// Noise level `c`, in `[0, 1)`.
    pub noise_scale: f64,
    /// Exponential suppression rate `k`, `>= 0`.
    pub decay_rate: f64,
    pub signed: bool,
}

impl QuantizerState {
    /// Signed codes span `[-2^(n-1), 2^(n-1) - 1]`, unsigned `[0, 2^n - 1]`.
    pub fn new(bits: u32, signed: bool, step_size: f64) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::Param(format!("bit-width must be in 2..=16, got {bits}")));
        }
        let (q_low, q_high) = if signed {
            (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
        } else {
            (0, (1i64 << bits) - 1)
        };
        let state = Self {
            step_size,
            bits,
            q_low,
            q_high,
            noise_scale: 0.0,
            decay_rate: 0.0,
            signed,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn with_noise(mut self, noise_scale: f64, decay_rate: f64) -> Result<Self> {
        self.noise_scale = noise_scale;
        self.decay_rate = decay_rate;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Param(format!(
                "step size must be positive and finite, got {}",
                self.step_size
            )));
        }
        if !(0.0..1.0).contains(&self.noise_scale) {
            return Err(Error::Param(format!(
                "noise scale c must be in [0, 1), got {}",
                self.noise_scale
            )));
        }
        if !(self.decay_rate >= 0.0) {
            return Err(Error::Param(format!(
                "decay rate k must be >= 0, got {}",
                self.decay_rate
            )));
        }
        if self.q_low >= self.q_high {
            return Err(Error::Param(format!(
                "empty code range [{}, {}]",
                self.q_low, self.q_high
            )));
        }
        Ok(())
    }

    pub fn low(&self) -> f64 {
        self.q_low as f64
    }

    pub fn high(&self) -> f64 {
        self.q_high as f64
    }

    /// Sets the step size from `2 * mean|w| / sqrt(Q_H)`, floored.
    pub fn init_step_size(&mut self, w: &Tensor) {
        self.step_size = lsq_init_step_size(w, self.q_high);
    }

    /// Applies the step-size floor; returns true when the floor was hit.
    pub fn clamp_step_size(&mut self) -> bool {
        if self.step_size < STEP_SIZE_FLOOR || self.step_size.is_nan() {
            self.step_size = STEP_SIZE_FLOOR;
            true
        } else {
            false
        }
    }
}

/// `2 * mean|w| / sqrt(Q_H)`, never below [`STEP_SIZE_FLOOR`].
pub fn lsq_init_step_size(w: &Tensor, q_high: i64) -> f64 {
    (2.0 * w.mean_abs() / (q_high as f64).sqrt()).max(STEP_SIZE_FLOOR)
}

#[inline]
fn quantize_scalar(w: f64, s: f64, lo: f64, hi: f64) -> f64 {
    (w / s).clamp(lo, hi).round() * s
}

/// Forward-only quantization; bit-identical to [`quantize`]'s forward value.
pub fn quantize_values(w: &Tensor, q: &QuantizerState) -> Result<Tensor> {
    q.validate()?;
    let (s, lo, hi) = (q.step_size, q.low(), q.high());
    Ok(w.map(|x| quantize_scalar(x, s, lo, hi)))
}

/// Differentiable quantizer over tape values; `step` is the one-element
/// step-size variable whose value must equal `q.step_size`.
pub fn quantize<'t>(w: Var<'t>, step: Var<'t>, q: &QuantizerState) -> Result<Var<'t>> {
    let s = step.value();
    if s.len() != 1 {
        return Err(Error::Param(format!("step size must be a single value, got shape {:?}", s.shape())));
    }
    let mut checked = *q;
    checked.step_size = s.data()[0];
    checked.validate()?;
    w.div(step)?.clip(q.low(), q.high()).round_ste().mul(step)
}

/// Closed-form `dQ/ds` for one element: `round(w/s) - w/s` in range, `Q_L`
/// below it and `Q_H` above it (branching on `w/s`).
pub fn step_size_grad_reference(w: f64, q: &QuantizerState) -> f64 {
    let u = w / q.step_size;
    if u < q.low() {
        q.low()
    } else if u > q.high() {
        q.high()
    } else {
        -u + u.round()
    }
}

/// Per-element noise standard deviation `c * exp(-k * err) * sqrt(err)`.
pub fn noise_magnitude(err: &Tensor, c: f64, k: f64) -> Tensor {
    err.map(|e| noise_magnitude_scalar(e, c, k))
}

#[inline]
pub fn noise_magnitude_scalar(err: f64, c: f64, k: f64) -> f64 {
    c * (-k * err).exp() * err.sqrt()
}

/// Tempered quantizer: `Q(w) + sg(policy_scale * noise_magnitude(|Q(w)-w|) * eps)`.
///
/// When `c * policy_scale == 0` the plain quantizer output is returned
/// unchanged and no random numbers are drawn.
pub fn quantize_tempered<'t>(
    w: Var<'t>,
    step: Var<'t>,
    q: &QuantizerState,
    rng: &mut RandomSource,
    policy_scale: f64,
) -> Result<Var<'t>> {
    if !(policy_scale >= 0.0) {
        return Err(Error::Param(format!("policy scale must be >= 0, got {policy_scale}")));
    }
    let quantized = quantize(w, step, q)?;
    let amplitude = q.noise_scale * policy_scale;
    if amplitude == 0.0 {
        return Ok(quantized);
    }
    let tape = w.tape();
    let mut eps = Tensor::zeros(&quantized.shape());
    rng.fill_normal(eps.data_mut());
    let err = quantized.sub(w)?.abs();
    let noise = err
        .scale(-q.decay_rate)
        .exp()
        .mul(err.sqrt())?
        .scale(amplitude)
        .mul(tape.constant(eps))?;
    quantized.add(noise.stop_gradient())
}

/// Snapshot of how well a weight tensor is represented by its quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizationDiagnostics {
    pub mean_abs_error: f64,
    pub step_size: f64,
    pub max_abs_weight: f64,
    /// Fraction of elements outside `[Q_L * s, Q_H * s]`.
    pub clip_fraction: f64,
    /// Mean tempering standard deviation at the current error, before any
    /// policy scaling.
    pub mean_noise_std: f64,
}

pub fn diagnostics(w: &Tensor, q: &QuantizerState) -> Result<QuantizationDiagnostics> {
    let qw = quantize_values(w, q)?;
    let n = w.len().max(1) as f64;
    let (lo, hi) = (q.low() * q.step_size, q.high() * q.step_size);
    let mut err_sum = 0.0;
    let mut noise_sum = 0.0;
    let mut clipped = 0usize;
    for (&x, &y) in w.data().iter().zip(qw.data()) {
        let e = (y - x).abs();
        err_sum += e;
        noise_sum += noise_magnitude_scalar(e, q.noise_scale, q.decay_rate);
        if x < lo || x > hi {
            clipped += 1;
        }
    }
    Ok(QuantizationDiagnostics {
        mean_abs_error: err_sum / n,
        step_size: q.step_size,
        max_abs_weight: w.max_abs(),
        clip_fraction: clipped as f64 / n,
        mean_noise_std: noise_sum / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn two_bit(s: f64) -> QuantizerState {
        QuantizerState::new(2, true, s).unwrap()
    }

    #[test]
    fn code_ranges() {
        let q = QuantizerState::new(2, true, 0.1).unwrap();
        assert_eq!((q.q_low, q.q_high), (-2, 1));
        let q = QuantizerState::new(8, true, 0.1).unwrap();
        assert_eq!((q.q_low, q.q_high), (-128, 127));
        let q = QuantizerState::new(4, false, 0.1).unwrap();
        assert_eq!((q.q_low, q.q_high), (0, 15));
    }

    #[test]
    fn invalid_states_are_rejected() {
        assert!(QuantizerState::new(1, true, 0.1).is_err());
        assert!(QuantizerState::new(4, true, 0.0).is_err());
        assert!(QuantizerState::new(4, true, -0.1).is_err());
        let q = two_bit(0.1);
        assert!(q.with_noise(1.0, 50.0).is_err());
        assert!(q.with_noise(-0.1, 50.0).is_err());
        assert!(q.with_noise(0.2, -1.0).is_err());
        assert!(q.with_noise(0.0, 0.0).is_ok());
    }

    #[test]
    fn quantize_examples() {
        let q = two_bit(0.1);
        let w = Tensor::from_vec(vec![0.0, 0.37, -0.25]);
        let out = quantize_values(&w, &q).unwrap();
        assert_eq!(out.data()[0], 0.0);
        assert!((out.data()[1] - 0.1).abs() < 1e-15);
        assert!((out.data()[2] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn clipped_branch_gradients() {
        let q = two_bit(0.1);
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(-0.25));
        let s = tape.param(Tensor::scalar(0.1));
        let out = quantize(w, s, &q).unwrap();
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt(w).item().unwrap(), 0.0);
        assert_eq!(g.wrt(s).item().unwrap(), -2.0);
    }

    #[test]
    fn non_positive_step_is_a_parameter_error() {
        let q = two_bit(0.1);
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(0.3));
        let s = tape.param(Tensor::scalar(0.0));
        assert!(matches!(quantize(w, s, &q), Err(Error::Param(_))));
        let mut bad = q;
        bad.step_size = -1.0;
        assert!(quantize_values(&Tensor::scalar(1.0), &bad).is_err());
    }

    #[test]
    fn step_size_reference_examples() {
        // 3.7 sits inside the 4-bit range [-8, 7].
        let wide = QuantizerState::new(4, true, 0.1).unwrap();
        assert!((step_size_grad_reference(0.37, &wide) - 0.3).abs() < 1e-12);
        let q = two_bit(0.1);
        assert_eq!(step_size_grad_reference(0.37, &q), 1.0);
        assert_eq!(step_size_grad_reference(5.0, &q), 1.0);
        assert_eq!(step_size_grad_reference(-5.0, &q), -2.0);
        assert_eq!(step_size_grad_reference(0.1, &q), 0.0);
        // Exactly on the lower code is in range.
        assert_eq!(step_size_grad_reference(-0.2, &q), 0.0);
    }

    #[test]
    fn noise_magnitude_examples() {
        let m = noise_magnitude(&Tensor::from_vec(vec![0.0, 0.01]), 0.2, 50.0);
        assert_eq!(m.data()[0], 0.0);
        let expected = 0.2 * (-0.5f64).exp() * 0.1;
        assert!((m.data()[1] - expected).abs() < 1e-15);
        assert!((m.data()[1] - 0.012131).abs() < 1e-6);
    }

    #[test]
    fn noise_peak_is_at_half_inverse_decay() {
        // Grid search oracle for argmax of c * exp(-kx) * sqrt(x).
        let k = 50.0;
        let grid: Vec<f64> = (1..=4000).map(|i| i as f64 * 1e-5).collect();
        let best = grid
            .iter()
            .copied()
            .max_by(|a, b| {
                noise_magnitude_scalar(*a, 0.2, k)
                    .partial_cmp(&noise_magnitude_scalar(*b, 0.2, k))
                    .unwrap()
            })
            .unwrap();
        assert!((best - 1.0 / (2.0 * k)).abs() <= 1e-5);
    }

    #[test]
    fn noise_is_suppressed_at_large_error() {
        for i in 0..100 {
            let err = 0.2 + i as f64 * 0.05;
            assert!(noise_magnitude_scalar(err, 0.3, 50.0) < 1e-3 * 0.3);
        }
    }

    #[test]
    fn tempered_with_zero_noise_is_plain_quantizer() {
        let q = two_bit(0.1);
        let tape = Tape::new();
        let w = tape.param(Tensor::from_vec(vec![0.37, -0.03, 0.049]));
        let s = tape.param(Tensor::scalar(0.1));
        let mut rng = RandomSource::new(0);
        let a = quantize(w, s, &q).unwrap();
        let b = quantize_tempered(w, s, &q, &mut rng, 1.0).unwrap();
        assert!(a.value().bit_eq(&b.value()));
    }

    #[test]
    fn tempered_gradient_equals_plain_gradient() {
        let q = QuantizerState::new(4, true, 0.05).unwrap().with_noise(0.3, 10.0).unwrap();
        let w0 = Tensor::from_vec(vec![0.37, -0.03, 0.049, -0.9, 0.2]);
        let grads = |tempered: bool, seed: u64| {
            let tape = Tape::new();
            let w = tape.param(w0.clone());
            let s = tape.param(Tensor::scalar(q.step_size));
            let mut rng = RandomSource::new(seed);
            let out = if tempered {
                quantize_tempered(w, s, &q, &mut rng, 1.0).unwrap()
            } else {
                quantize(w, s, &q).unwrap()
            };
            let g = tape.backward(out.sum()).unwrap();
            (g.wrt(w).clone(), g.wrt(s).clone())
        };
        let plain = grads(false, 0);
        for seed in [1, 2, 3] {
            let t = grads(true, seed);
            assert!(t.0.bit_eq(&plain.0));
            assert!(t.1.bit_eq(&plain.1));
        }
    }

    #[test]
    fn diagnostics_of_zero_weights() {
        let d = diagnostics(&Tensor::zeros(&[10]), &two_bit(0.1)).unwrap();
        assert_eq!(d.mean_abs_error, 0.0);
        assert_eq!(d.clip_fraction, 0.0);
        assert_eq!(d.max_abs_weight, 0.0);
    }

    #[test]
    fn diagnostics_uniform_error_is_quarter_step() {
        // Expected |rounding error| over a uniform bin is s/4.
        let q = QuantizerState::new(4, true, 0.05).unwrap();
        let (lo, hi) = (q.low() * q.step_size, q.high() * q.step_size);
        let mut rng = RandomSource::new(8);
        let w = Tensor::from_vec((0..200_000).map(|_| rng.uniform_range(lo, hi)).collect());
        let d = diagnostics(&w, &q).unwrap();
        assert!((d.mean_abs_error - q.step_size / 4.0).abs() < 0.01 * q.step_size);
        assert_eq!(d.clip_fraction, 0.0);
    }

    #[test]
    fn lsq_initializer() {
        let w = Tensor::from_vec(vec![0.1, -0.3, 0.2, 0.0]);
        let expected = 2.0 * 0.15 / 7f64.sqrt();
        assert!((lsq_init_step_size(&w, 7) - expected).abs() < 1e-15);
        assert_eq!(lsq_init_step_size(&Tensor::zeros(&[3]), 7), STEP_SIZE_FLOOR);
    }

    #[test]
    fn clamp_floor() {
        let mut q = two_bit(0.1);
        q.step_size = -3.0;
        assert!(q.clamp_step_size());
        assert_eq!(q.step_size, STEP_SIZE_FLOOR);
        assert!(!q.clamp_step_size());
    }
}
