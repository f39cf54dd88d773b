use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::ParamKind;
use crate::quantizer::{lsq_init_step_size, quantize, quantize_tempered, QuantizerState};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// What a visited tensor is: a trainable parameter or a state buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Param(ParamKind),
    Buffer,
}

/// Mutable view of one named tensor inside a model.
pub struct Slot<'a> {
    pub name: String,
    pub kind: SlotKind,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// How a forward pass treats quantizers, noise and normalization.
pub struct ForwardMode<'r> {
    /// Batch statistics for normalization, running-stat updates, and
    /// tempering noise (when the other switches allow it).
    pub train: bool,
    pub policy_scale: f64,
    pub temper_activations: bool,
    /// When false every quantizer takes the plain path and the tempering
    /// code is never entered.
    pub tempering: bool,
    pub rng: Option<&'r mut RandomSource>,
}

impl<'r> ForwardMode<'r> {
    /// Running statistics, no noise.
    pub fn eval() -> Self {
        Self {
            train: false,
            policy_scale: 0.0,
            temper_activations: false,
            tempering: false,
            rng: None,
        }
    }

    pub fn train(policy_scale: f64, rng: &'r mut RandomSource) -> Self {
        Self {
            train: true,
            policy_scale,
            temper_activations: false,
            tempering: true,
            rng: Some(rng),
        }
    }

    fn quantize<'t>(
        &mut self,
        x: Var<'t>,
        step: Var<'t>,
        q: &QuantizerState,
        activation: bool,
    ) -> Result<Var<'t>> {
        let noisy = self.train && self.tempering && (!activation || self.temper_activations);
        if !noisy {
            return quantize(x, step, q);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::Param("tempered forward pass needs a random source".into()))?;
        quantize_tempered(x, step, q, rng, self.policy_scale)
    }
}

/// Unsigned (or, for raw inputs, signed) quantizer on a layer's input.
/// The step size is set from the first batch it sees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationQuantizer {
    pub state: QuantizerState,
    pub initialized: bool,
}

/// Weight tensor entering a matmul or convolution, with its quantizers.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantWeight {
    pub weight: Tensor,
    pub quantizer: Option<QuantizerState>,
    pub activation_quantizer: Option<ActivationQuantizer>,
    /// First or last layer of the network.
    pub edge: bool,
}

impl QuantWeight {
    fn new(weight: Tensor, edge: bool) -> Self {
        Self {
            weight,
            quantizer: None,
            activation_quantizer: None,
            edge,
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_>)) {
        f(Slot {
            name: format!("{prefix}.weight"),
            kind: SlotKind::Param(ParamKind::Weight),
            shape: self.weight.shape().to_vec(),
            data: self.weight.data_mut(),
        });
    }

    fn visit_steps(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_>)) {
        if let Some(q) = &mut self.quantizer {
            f(Slot {
                name: format!("{prefix}.step"),
                kind: SlotKind::Param(ParamKind::StepSize),
                shape: vec![],
                data: std::slice::from_mut(&mut q.step_size),
            });
        }
        if let Some(a) = &mut self.activation_quantizer {
            f(Slot {
                name: format!("{prefix}.act_step"),
                kind: SlotKind::Param(ParamKind::StepSize),
                shape: vec![],
                data: std::slice::from_mut(&mut a.state.step_size),
            });
        }
    }

    /// Pushes the step-size vars (visit order) and returns the quantized
    /// input and weight.
    fn apply<'t>(
        &mut self,
        tape: &'t Tape,
        x: Var<'t>,
        w: Var<'t>,
        mode: &mut ForwardMode<'_>,
        params: &mut Vec<Var<'t>>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if let Some(a) = &mut self.activation_quantizer {
            if !a.initialized {
                a.state.step_size = lsq_init_step_size(&x.value(), a.state.q_high);
                a.initialized = true;
            }
        }
        let mut qw = w;
        if let Some(q) = &self.quantizer {
            let step = tape.param(Tensor::scalar(q.step_size));
            params.push(step);
            let g = step_grad_scale(w.value().len(), q);
            qw = mode.quantize(w, step.grad_scale(g), q, false)?;
        }
        let mut qx = x;
        if let Some(a) = &self.activation_quantizer {
            let step = tape.param(Tensor::scalar(a.state.step_size));
            params.push(step);
            let xs = x.shape();
            let g = step_grad_scale(xs[1..].iter().product(), &a.state);
            qx = mode.quantize(x, step.grad_scale(g), &a.state, true)?;
        }
        Ok((qx, qw))
    }
}

/// Step-size gradient multiplier `1 / sqrt(n * Q_H)` for a quantizer over
/// `n` values (per sample, for activations), as in LSQ.
pub fn step_grad_scale(n: usize, q: &QuantizerState) -> f64 {
    1.0 / ((n.max(1) as f64) * (q.q_high.max(1) as f64)).sqrt()
}

/// Fully connected layer, weight stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLinear {
    pub core: QuantWeight,
    pub bias: Tensor,
}

impl QuantLinear {
    /// Uniform `±1/sqrt(fan_in)` initialization for weight and bias.
    pub fn new(inputs: usize, outputs: usize, edge: bool, rng: &mut RandomSource) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut w = Tensor::zeros(&[inputs, outputs]);
        for v in w.data_mut() {
            *v = rng.uniform_range(-bound, bound);
        }
        let mut b = Tensor::zeros(&[outputs]);
        for v in b.data_mut() {
            *v = rng.uniform_range(-bound, bound);
        }
        Self {
            core: QuantWeight::new(w, edge),
            bias: b,
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_>)) {
        self.core.visit(prefix, f);
        f(Slot {
            name: format!("{prefix}.bias"),
            kind: SlotKind::Param(ParamKind::Bias),
            shape: self.bias.shape().to_vec(),
            data: self.bias.data_mut(),
        });
        self.core.visit_steps(prefix, f);
    }

    pub fn forward<'t>(
        &mut self,
        tape: &'t Tape,
        x: Var<'t>,
        mode: &mut ForwardMode<'_>,
        params: &mut Vec<Var<'t>>,
    ) -> Result<Var<'t>> {
        let w = tape.param(self.core.weight.clone());
        let b = tape.param(self.bias.clone());
        params.push(w);
        params.push(b);
        let (x, w) = self.core.apply(tape, x, w, mode, params)?;
        x.matmul(w)?.add(b)
    }
}

/// Square-kernel convolution, weight `[C_out, C_in, k, k]`, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantConv2d {
    pub core: QuantWeight,
    pub stride: usize,
    pub padding: usize,
}

impl QuantConv2d {
    /// He-normal initialization, `std = sqrt(2 / fan_in)`.
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        edge: bool,
        rng: &mut RandomSource,
    ) -> Self {
        let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
        let mut w = Tensor::zeros(&[cout, cin, kernel, kernel]);
        for v in w.data_mut() {
            *v = std * rng.normal();
        }
        Self {
            core: QuantWeight::new(w, edge),
            stride,
            padding,
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_>)) {
        self.core.visit(prefix, f);
        self.core.visit_steps(prefix, f);
    }

    pub fn forward<'t>(
        &mut self,
        tape: &'t Tape,
        x: Var<'t>,
        mode: &mut ForwardMode<'_>,
        params: &mut Vec<Var<'t>>,
    ) -> Result<Var<'t>> {
        let w = tape.param(self.core.weight.clone());
        params.push(w);
        let (x, w) = self.core.apply(tape, x, w, mode, params)?;
        x.conv2d(w, self.stride, self.padding)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalization with running statistics (unbiased running variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_>)) {
        let shape = self.gamma.shape().to_vec();
        f(Slot {
            name: format!("{prefix}.gamma"),
            kind: SlotKind::Param(ParamKind::Bias),
            shape: shape.clone(),
            data: self.gamma.data_mut(),
        });
        f(Slot {
            name: format!("{prefix}.beta"),
            kind: SlotKind::Param(ParamKind::Bias),
            shape: shape.clone(),
            data: self.beta.data_mut(),
        });
        f(Slot {
            name: format!("{prefix}.running_mean"),
            kind: SlotKind::Buffer,
            shape: shape.clone(),
            data: self.running_mean.data_mut(),
        });
        f(Slot {
            name: format!("{prefix}.running_var"),
            kind: SlotKind::Buffer,
            shape,
            data: self.running_var.data_mut(),
        });
    }

    pub fn forward<'t>(
        &mut self,
        tape: &'t Tape,
        x: Var<'t>,
        train: bool,
        params: &mut Vec<Var<'t>>,
    ) -> Result<Var<'t>> {
        let g = tape.param(self.gamma.clone());
        let b = tape.param(self.beta.clone());
        params.push(g);
        params.push(b);
        if !train {
            let out = x.batch_norm(
                g,
                b,
                Some((self.running_mean.data(), self.running_var.data())),
                BN_EPS,
            )?;
            return Ok(out.out);
        }
        let out = x.batch_norm(g, b, None, BN_EPS)?;
        let shape = x.shape();
        let count: usize = shape[0] * shape[2..].iter().product::<usize>();
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&out.batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&out.batch_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
        Ok(out.out)
    }
}
