//! SGD with momentum, learning-rate schedules, and Monte-Carlo validators
//! for the noise behaviour of the update rule.

mod schedule;
mod theory;

pub use schedule::{LrSchedule, ScheduleKind};
pub use theory::{
    momentum_noise_variance_mc, momentum_variance_factor, taylor_equivalence_check,
    SimulatedNoiseModel,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the optimizer treats a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Matrix-multiplication weights.
    Weight,
    /// Biases and normalization affine parameters.
    Bias,
    /// Learned quantizer step sizes: never weight-decayed, optionally on a
    /// scaled learning rate.
    StepSize,
}

/// Heavy-ball SGD: `v <- m v + (g + wd * w)`, `w <- w - lr * v`.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for step-size parameters.
    pub step_size_lr_scale: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Param(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Param(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(Self {
            momentum,
            weight_decay,
            step_size_lr_scale: 1.0,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self, slot: usize) -> Option<&[f64]> {
        self.velocity.get(slot).map(Vec::as_slice)
    }

    /// Updates one parameter in place. `slot` identifies the parameter's
    /// velocity buffer; buffers are zero-initialized on first use and must
    /// keep their length afterwards.
    pub fn update(
        &mut self,
        slot: usize,
        kind: ParamKind,
        param: &mut [f64],
        grad: &[f64],
        lr: f64,
    ) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::Shape {
                op: "sgd_step",
                lhs: vec![param.len()],
                rhs: vec![grad.len()],
            });
        }
        if self.velocity.len() <= slot {
            self.velocity.resize_with(slot + 1, Vec::new);
        }
        let v = &mut self.velocity[slot];
        if v.is_empty() {
            v.resize(param.len(), 0.0);
        } else if v.len() != param.len() {
            return Err(Error::Shape {
                op: "sgd_step velocity",
                lhs: vec![v.len()],
                rhs: vec![param.len()],
            });
        }
        let (decay, lr) = match kind {
            ParamKind::StepSize => (0.0, lr * self.step_size_lr_scale),
            ParamKind::Weight | ParamKind::Bias => (self.weight_decay, lr),
        };
        for ((w, vi), &g) in param.iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = momentum_update(*vi, g + decay * *w, self.momentum);
            *w -= lr * *vi;
        }
        Ok(())
    }
}

/// One momentum accumulation step, `m * v + g`.
#[inline]
pub fn momentum_update(v: f64, g: f64, m: f64) -> f64 {
    m * v + g
}

/// Steps a list of weight tensors with their gradients.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        state.update(slot, ParamKind::Weight, p.data_mut(), g.data(), lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut state = OptimizerState::new(0.0, 0.0).unwrap();
        let mut w = vec![Tensor::from_vec(vec![0.0])];
        sgd_step(&mut w, &[Tensor::from_vec(vec![1.0])], &mut state, 0.1).unwrap();
        assert!((w[0].data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut state = OptimizerState::new(0.9, 0.0).unwrap();
        let mut w = vec![Tensor::from_vec(vec![0.0])];
        let g = [Tensor::from_vec(vec![1.0])];
        sgd_step(&mut w, &g, &mut state, 0.1).unwrap();
        sgd_step(&mut w, &g, &mut state, 0.1).unwrap();
        assert!((w[0].data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_keeps_weights_and_decays_velocity() {
        let mut state = OptimizerState::new(0.9, 0.0).unwrap();
        let mut w = vec![Tensor::from_vec(vec![0.5, -1.0])];
        sgd_step(&mut w, &[Tensor::from_vec(vec![1.0, 2.0])], &mut state, 0.1).unwrap();
        let before = w[0].clone();
        let zero = [Tensor::zeros(&[2])];
        let v0 = state.velocity(0).unwrap().to_vec();
        let mut expected_v = v0.clone();
        let mut expected_w = before.data().to_vec();
        for _ in 0..3 {
            sgd_step(&mut w, &zero, &mut state, 0.1).unwrap();
            for (ev, ew) in expected_v.iter_mut().zip(expected_w.iter_mut()) {
                *ev *= 0.9;
                *ew -= 0.1 * *ev;
            }
        }
        assert_eq!(state.velocity(0).unwrap(), expected_v.as_slice());
        assert_eq!(w[0].data(), expected_w.as_slice());

        // Fresh state with zero gradients is the identity.
        let mut fresh = OptimizerState::new(0.9, 0.0).unwrap();
        let mut w = vec![before.clone()];
        sgd_step(&mut w, &zero, &mut fresh, 0.1).unwrap();
        assert!(w[0].bit_eq(&before));
    }

    #[test]
    fn weight_decay_skips_step_sizes() {
        let mut state = OptimizerState::new(0.0, 0.5).unwrap();
        let mut w = [2.0];
        state.update(0, ParamKind::Weight, &mut w, &[0.0], 0.1).unwrap();
        assert!((w[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        let mut s = [2.0];
        state.update(1, ParamKind::StepSize, &mut s, &[0.0], 0.1).unwrap();
        assert_eq!(s[0], 2.0);
    }

    #[test]
    fn step_size_lr_scale_applies_only_to_step_sizes() {
        let mut state = OptimizerState::new(0.0, 0.0).unwrap();
        state.step_size_lr_scale = 0.5;
        let mut s = [1.0];
        state.update(0, ParamKind::StepSize, &mut s, &[1.0], 0.1).unwrap();
        assert!((s[0] - 0.95).abs() < 1e-15);
        let mut w = [1.0];
        state.update(1, ParamKind::Weight, &mut w, &[1.0], 0.1).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut state = OptimizerState::new(0.9, 0.0).unwrap();
        let mut w = vec![Tensor::zeros(&[2])];
        assert!(sgd_step(&mut w, &[Tensor::zeros(&[3])], &mut state, 0.1).is_err());
        assert!(sgd_step(&mut w, &[], &mut state, 0.1).is_err());
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(OptimizerState::new(1.0, 0.0).is_err());
        assert!(OptimizerState::new(0.5, -1.0).is_err());
    }
}
