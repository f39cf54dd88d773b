use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::models::{ForwardMode, Model};
use crate::optim::ParamKind;
use crate::rng::{stream, RandomSource};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpnessConfig {
    /// ℓ∞ radius.
    pub rho: f64,
    pub ascent_steps: usize,
    /// Sign-gradient step length.
    pub ascent_lr: f64,
    /// Fixed evaluation batches taken from the front of the data.
    pub batches: usize,
    pub batch_size: usize,
    /// The first restart starts at zero, the rest uniformly in the ball.
    pub restarts: usize,
    pub seed: u64,
}

impl SharpnessConfig {
    /// 20 steps of `rho / 10`, 3 restarts, 10 batches of 128.
    pub fn new(rho: f64) -> Self {
        Self {
            rho,
            ascent_steps: 20,
            ascent_lr: rho / 10.0,
            batches: 10,
            batch_size: 128,
            restarts: 3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::Param(format!("rho must be >= 0, got {}", self.rho)));
        }
        if self.restarts == 0 || self.batches == 0 || self.batch_size == 0 {
            return Err(Error::Param("restarts, batches and batch size must be >= 1".into()));
        }
        if !(self.ascent_lr >= 0.0) {
            return Err(Error::Param(format!("ascent step must be >= 0, got {}", self.ascent_lr)));
        }
        Ok(())
    }
}

/// A loss over a list of perturbable tensors, evaluated at `base + eps`.
pub trait Objective {
    /// Shapes of the perturbed tensors.
    fn shapes(&self) -> Vec<Vec<usize>>;

    fn loss(&mut self, eps: &[Tensor]) -> Result<f64>;

    fn loss_and_grad(&mut self, eps: &[Tensor]) -> Result<(f64, Vec<Tensor>)>;
}

/// `max_{|eps|∞ <= rho} L(eps) - L(0)` by projected sign-gradient ascent,
/// best over restarts and over every visited point.
pub fn sharpness_of(objective: &mut impl Objective, cfg: &SharpnessConfig) -> Result<f64> {
    cfg.validate()?;
    if cfg.rho == 0.0 {
        return Ok(0.0);
    }
    let shapes = objective.shapes();
    let zero: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    let base = objective.loss(&zero)?;
    if !base.is_finite() {
        return Err(Error::Param(format!("unperturbed loss is not finite: {base}")));
    }
    let mut rng = RandomSource::derive(cfg.seed, &[stream::SHARPNESS]);
    let mut best = 0.0f64;
    let mut failed = 0;
    for restart in 0..cfg.restarts {
        let mut eps = zero.clone();
        if restart > 0 {
            for t in &mut eps {
                for v in t.data_mut() {
                    *v = rng.uniform_range(-cfg.rho, cfg.rho);
                }
            }
        }
        match ascend(objective, &mut eps, cfg, base) {
            Ok(gain) => best = best.max(gain),
            Err(Error::NonFinite { .. }) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    if failed == cfg.restarts {
        return Err(Error::AscentFailed(failed));
    }
    Ok(best)
}

fn ascend(objective: &mut impl Objective, eps: &mut [Tensor], cfg: &SharpnessConfig, base: f64) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for step in 0..=cfg.ascent_steps {
        let last = step == cfg.ascent_steps;
        let (loss, grads) = if last {
            (objective.loss(eps)?, Vec::new())
        } else {
            objective.loss_and_grad(eps)?
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { epoch: 0, step });
        }
        best = best.max(loss - base);
        for (e, g) in eps.iter_mut().zip(&grads) {
            for (v, &gv) in e.data_mut().iter_mut().zip(g.data()) {
                let dir = if gv > 0.0 {
                    1.0
                } else if gv < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *v = (*v + cfg.ascent_lr * dir).clamp(-cfg.rho, cfg.rho);
            }
            debug_assert!(e.max_abs() <= cfg.rho);
        }
    }
    Ok(best)
}

/// Mean cross-entropy of a model over fixed batches, with latent
/// matmul/conv weights perturbed before quantization. Runs in evaluation
/// mode: running normalization statistics, no noise.
pub struct ModelObjective {
    model: Model,
    batches: Vec<(Tensor, Vec<usize>)>,
}

impl ModelObjective {
    pub fn new(model: &Model, data: &Dataset, cfg: &SharpnessConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Param("sharpness needs a non-empty dataset".into()));
        }
        let mut batches = Vec::new();
        for b in 0..cfg.batches {
            let start = b * cfg.batch_size;
            if start >= data.len() {
                break;
            }
            let idx: Vec<usize> = (start..(start + cfg.batch_size).min(data.len())).collect();
            batches.push(data.gather(&idx)?);
        }
        Ok(Self {
            model: model.clone(),
            batches,
        })
    }

    fn perturbed(&self, eps: &[Tensor]) -> Result<Model> {
        let mut m = self.model.clone();
        let mut it = eps.iter();
        let mut mismatch = false;
        m.for_each_param_mut(|_, kind, data| {
            if kind == ParamKind::Weight {
                match it.next() {
                    Some(e) if e.len() == data.len() => {
                        for (w, d) in data.iter_mut().zip(e.data()) {
                            *w += d;
                        }
                    }
                    _ => mismatch = true,
                }
            }
        });
        if mismatch || it.next().is_some() {
            return Err(Error::Param("perturbation does not match model weights".into()));
        }
        Ok(m)
    }

    fn run(&mut self, eps: &[Tensor], with_grad: bool) -> Result<(f64, Vec<Tensor>)> {
        let mut model = self.perturbed(eps)?;
        let kinds: Vec<ParamKind> = model.param_layout().into_iter().map(|(_, k)| k).collect();
        let mut total = 0.0;
        let mut grads: Vec<Tensor> = Vec::new();
        for (x, labels) in &self.batches {
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = model.forward(&tape, xv, &mut ForwardMode::eval())?;
            let loss = out.logits.softmax_cross_entropy(labels)?;
            total += loss.value().item()?;
            if with_grad {
                let g = tape.backward(loss)?;
                let weights = out
                    .params
                    .iter()
                    .zip(&kinds)
                    .filter(|(_, k)| **k == ParamKind::Weight)
                    .map(|(p, _)| g.wrt(*p));
                if grads.is_empty() {
                    grads = weights.cloned().collect();
                } else {
                    for (acc, w) in grads.iter_mut().zip(weights) {
                        for (a, b) in acc.data_mut().iter_mut().zip(w.data()) {
                            *a += b;
                        }
                    }
                }
            }
        }
        let n = self.batches.len() as f64;
        for g in &mut grads {
            for v in g.data_mut() {
                *v /= n;
            }
        }
        Ok((total / n, grads))
    }
}

impl Objective for ModelObjective {
    fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        self.model.clone().visit(&mut |s| {
            if s.kind == crate::models::SlotKind::Param(ParamKind::Weight) {
                shapes.push(s.shape);
            }
        });
        shapes
    }

    fn loss(&mut self, eps: &[Tensor]) -> Result<f64> {
        Ok(self.run(eps, false)?.0)
    }

    fn loss_and_grad(&mut self, eps: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        self.run(eps, true)
    }
}

/// Sharpness of a model's evaluation-mode loss on a fixed subset of `data`.
pub fn sharpness(model: &Model, data: &Dataset, cfg: &SharpnessConfig) -> Result<f64> {
    cfg.validate()?;
    if cfg.rho == 0.0 {
        return Ok(0.0);
    }
    sharpness_of(&mut ModelObjective::new(model, data, cfg)?, cfg)
}

/// `L(eps) = lambda/2 * |w + eps|^2`; its sharpness over the ℓ∞ ball is
/// attained at a corner.
pub struct QuadraticObjective {
    pub lambda: f64,
    pub w: Tensor,
}

impl QuadraticObjective {
    /// Closed-form maximum `max_eps L(w+eps) - L(w)` (elementwise corner).
    pub fn exact_sharpness(&self, rho: f64) -> f64 {
        self.w
            .data()
            .iter()
            .map(|&w| 0.5 * self.lambda * ((w.abs() + rho).powi(2) - w * w))
            .sum()
    }
}

impl Objective for QuadraticObjective {
    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![self.w.shape().to_vec()]
    }

    fn loss(&mut self, eps: &[Tensor]) -> Result<f64> {
        let x = self.w.zip_map(&eps[0], |a, b| a + b)?;
        Ok(0.5 * self.lambda * x.data().iter().map(|v| v * v).sum::<f64>())
    }

    fn loss_and_grad(&mut self, eps: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let x = self.w.zip_map(&eps[0], |a, b| a + b)?;
        let loss = 0.5 * self.lambda * x.data().iter().map(|v| v * v).sum::<f64>();
        Ok((loss, vec![x.map(|v| self.lambda * v)]))
    }
}
