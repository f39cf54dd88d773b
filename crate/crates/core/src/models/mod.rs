//! Desk-scale networks whose matmul and convolution weights pass through
//! the (tempered) quantizer: a ReLU MLP and `resnet-tiny`, a three-stage
//! residual CNN built from ResNet basic blocks.

pub mod checkpoint;
mod layers;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, DType};
pub use layers::{
    ActivationQuantizer, BatchNorm2d, ForwardMode, QuantConv2d, QuantLinear, QuantWeight, Slot,
    SlotKind, BN_EPS, BN_MOMENTUM,
};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::noise_policy::NoisePolicy;
use crate::optim::ParamKind;
use crate::quantizer::{lsq_init_step_size, QuantizerState};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    Mlp,
    ResnetTiny,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Mlp => "mlp",
            Architecture::ResnetTiny => "resnet-tiny",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "resnet-tiny" => Ok(Self::ResnetTiny),
            _ => Err(Error::Config(format!(
                "unknown architecture `{s}` (expected mlp or resnet-tiny)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// `[D]` for flat inputs or `[C, H, W]` for images.
    pub input_shape: Vec<usize>,
    /// MLP hidden layer sizes.
    pub hidden: Vec<usize>,
    /// resnet-tiny channel count of the first stage; later stages double it.
    pub width: usize,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    pub quantize_first_last: bool,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        Self {
            architecture: Architecture::Mlp,
            input_shape: vec![input_dim],
            hidden: hidden.to_vec(),
            width: 0,
            blocks_per_stage: 0,
            num_classes,
            quantize_first_last: true,
        }
    }

    pub fn resnet_tiny(input_shape: [usize; 3], width: usize, num_classes: usize) -> Self {
        Self {
            architecture: Architecture::ResnetTiny,
            input_shape: input_shape.to_vec(),
            hidden: vec![],
            width,
            blocks_per_stage: 2,
            num_classes,
            quantize_first_last: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.input_shape.iter().any(|&d| d == 0) || self.input_shape.is_empty() {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input_shape)));
        }
        match self.architecture {
            Architecture::Mlp if self.hidden.contains(&0) => {
                Err(Error::Config("MLP hidden sizes must be positive".into()))
            }
            Architecture::ResnetTiny if self.input_shape.len() != 3 => Err(Error::Config(format!(
                "resnet-tiny needs [C, H, W] input, got {:?}",
                self.input_shape
            ))),
            Architecture::ResnetTiny if self.width == 0 || self.blocks_per_stage == 0 => {
                Err(Error::Config("resnet-tiny width and blocks per stage must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BasicBlock {
    conv1: QuantConv2d,
    bn1: BatchNorm2d,
    conv2: QuantConv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(QuantConv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut RandomSource) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                QuantConv2d::new(cin, cout, 1, stride, 0, false, rng),
                BatchNorm2d::new(cout),
            )
        });
        Self {
            conv1: QuantConv2d::new(cin, cout, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(cout),
            conv2: QuantConv2d::new(cout, cout, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(cout),
            shortcut,
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(Slot<'_>)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit(&format!("{prefix}.shortcut.conv"), f);
            bn.visit(&format!("{prefix}.shortcut.bn"), f);
        }
    }

    fn forward<'t>(
        &mut self,
        tape: &'t Tape,
        x: Var<'t>,
        mode: &mut ForwardMode<'_>,
        params: &mut Vec<Var<'t>>,
    ) -> Result<Var<'t>> {
        let train = mode.train;
        let h = self.conv1.forward(tape, x, mode, params)?;
        let h = self.bn1.forward(tape, h, train, params)?.relu();
        let h = self.conv2.forward(tape, h, mode, params)?;
        let h = self.bn2.forward(tape, h, train, params)?;
        let skip = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x, mode, params)?;
                bn.forward(tape, s, train, params)?
            }
            None => x,
        };
        Ok(h.add(skip)?.relu())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ResNet {
    stem: QuantConv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
    fc: QuantLinear,
}

#[derive(Debug, Clone, PartialEq)]
enum Net {
    Mlp(Vec<QuantLinear>),
    ResNet(Box<ResNet>),
}

/// Borrowed view of one quantizable layer.
pub struct LayerView<'a> {
    pub name: String,
    pub layer: &'a QuantWeight,
}

/// Result of a forward pass: logits plus every parameter var in
/// [`Model::visit`] order (buffers excluded).
pub struct Forward<'t> {
    pub logits: Var<'t>,
    pub params: Vec<Var<'t>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    net: Net,
}

/// Builds a freshly initialized model; quantizers stay detached until
/// [`Model::enable_qat`].
pub fn build(spec: &ModelSpec, rng: &mut RandomSource) -> Result<Model> {
    spec.validate()?;
    let net = match spec.architecture {
        Architecture::Mlp => {
            let mut sizes = vec![spec.input_shape.iter().product::<usize>()];
            sizes.extend(&spec.hidden);
            sizes.push(spec.num_classes);
            let last = sizes.len() - 2;
            Net::Mlp(
                sizes
                    .windows(2)
                    .enumerate()
                    .map(|(i, p)| QuantLinear::new(p[0], p[1], i == 0 || i == last, rng))
                    .collect(),
            )
        }
        Architecture::ResnetTiny => {
            let w = spec.width;
            let stem = QuantConv2d::new(spec.input_shape[0], w, 3, 1, 1, true, rng);
            let mut stages = Vec::new();
            let mut cin = w;
            for (i, cout) in [w, 2 * w, 4 * w].into_iter().enumerate() {
                let blocks = (0..spec.blocks_per_stage)
                    .map(|b| {
                        let stride = if i > 0 && b == 0 { 2 } else { 1 };
                        let block = BasicBlock::new(cin, cout, stride, rng);
                        cin = cout;
                        block
                    })
                    .collect();
                stages.push(blocks);
            }
            Net::ResNet(Box::new(ResNet {
                stem,
                stem_bn: BatchNorm2d::new(w),
                stages,
                fc: QuantLinear::new(4 * w, spec.num_classes, true, rng),
            }))
        }
    };
    Ok(Model {
        spec: spec.clone(),
        net,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Visits every parameter and buffer in a fixed order.
    pub fn visit(&mut self, f: &mut dyn FnMut(Slot<'_>)) {
        match &mut self.net {
            Net::Mlp(layers) => {
                for (i, l) in layers.iter_mut().enumerate() {
                    l.visit(&format!("fc{i}"), f);
                }
            }
            Net::ResNet(r) => {
                r.stem.visit("stem.conv", f);
                r.stem_bn.visit("stem.bn", f);
                for (s, blocks) in r.stages.iter_mut().enumerate() {
                    for (b, block) in blocks.iter_mut().enumerate() {
                        block.visit(&format!("layer{}.{b}", s + 1), f);
                    }
                }
                r.fc.visit("fc", f);
            }
        }
    }

    /// Names and kinds of the trainable parameters, in visit order.
    pub fn param_layout(&self) -> Vec<(String, ParamKind)> {
        let mut out = Vec::new();
        self.clone().visit(&mut |s| {
            if let SlotKind::Param(kind) = s.kind {
                out.push((s.name, kind));
            }
        });
        out
    }

    /// Trainable element count (weights, biases, normalization affine
    /// parameters and any attached step sizes).
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.clone().visit(&mut |s| {
            if matches!(s.kind, SlotKind::Param(_)) {
                n += s.data.len();
            }
        });
        n
    }

    /// Applies `f` to every trainable parameter, in visit order, with its
    /// position in that order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, ParamKind, &mut [f64])) {
        let mut i = 0;
        self.visit(&mut |s| {
            if let SlotKind::Param(kind) = s.kind {
                f(i, kind, s.data);
                i += 1;
            }
        });
    }

    pub fn layers(&self) -> Vec<LayerView<'_>> {
        match &self.net {
            Net::Mlp(layers) => layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerView {
                    name: format!("fc{i}"),
                    layer: &l.core,
                })
                .collect(),
            Net::ResNet(r) => {
                let mut out = vec![LayerView {
                    name: "stem.conv".into(),
                    layer: &r.stem.core,
                }];
                for (s, blocks) in r.stages.iter().enumerate() {
                    for (b, block) in blocks.iter().enumerate() {
                        let p = format!("layer{}.{b}", s + 1);
                        out.push(LayerView {
                            name: format!("{p}.conv1"),
                            layer: &block.conv1.core,
                        });
                        out.push(LayerView {
                            name: format!("{p}.conv2"),
                            layer: &block.conv2.core,
                        });
                        if let Some((conv, _)) = &block.shortcut {
                            out.push(LayerView {
                                name: format!("{p}.shortcut.conv"),
                                layer: &conv.core,
                            });
                        }
                    }
                }
                out.push(LayerView {
                    name: "fc".into(),
                    layer: &r.fc.core,
                });
                out
            }
        }
    }

    fn layers_mut(&mut self) -> Vec<&mut QuantWeight> {
        match &mut self.net {
            Net::Mlp(layers) => layers.iter_mut().map(|l| &mut l.core).collect(),
            Net::ResNet(r) => {
                let mut out = vec![&mut r.stem.core];
                for block in r.stages.iter_mut().flatten() {
                    out.push(&mut block.conv1.core);
                    out.push(&mut block.conv2.core);
                    if let Some((conv, _)) = &mut block.shortcut {
                        out.push(&mut conv.core);
                    }
                }
                out.push(&mut r.fc.core);
                out
            }
        }
    }

    pub fn qat_enabled(&self) -> bool {
        self.layers().iter().any(|l| l.layer.quantizer.is_some())
    }

    /// Attaches `bits`-bit signed weight quantizers with step sizes from the
    /// LSQ heuristic on the current weights, carrying the policy's `c` and
    /// `k`. First and last layers are skipped unless the spec asks for them.
    /// Activation quantizers (optional) are unsigned except on the raw
    /// network input, and take their step size from the first batch.
    pub fn enable_qat(&mut self, bits: u32, policy: &NoisePolicy, quantize_activations: bool) -> Result<()> {
        let include_edges = self.spec.quantize_first_last;
        let (c, k) = if policy.enabled { (policy.c, policy.k) } else { (0.0, policy.k) };
        let layers = self.layers_mut();
        for (i, layer) in layers.into_iter().enumerate() {
            if layer.edge && !include_edges {
                layer.quantizer = None;
                layer.activation_quantizer = None;
                continue;
            }
            let s0 = lsq_init_step_size(&layer.weight, QuantizerState::new(bits, true, 1.0)?.q_high);
            layer.quantizer = Some(QuantizerState::new(bits, true, s0)?.with_noise(c, k)?);
            layer.activation_quantizer = if quantize_activations {
                // Only the raw network input can be negative.
                let signed = i == 0;
                Some(ActivationQuantizer {
                    state: QuantizerState::new(bits, signed, 1.0)?.with_noise(c, k)?,
                    initialized: false,
                })
            } else {
                None
            };
        }
        Ok(())
    }

    /// Removes all quantizers, returning to the full-precision network.
    pub fn disable_qat(&mut self) {
        for layer in self.layers_mut() {
            layer.quantizer = None;
            layer.activation_quantizer = None;
        }
    }

    /// Enforces the step-size floor on every quantizer; returns how many
    /// were clamped.
    pub fn clamp_step_sizes(&mut self) -> usize {
        let mut hits = 0;
        for layer in self.layers_mut() {
            if let Some(q) = &mut layer.quantizer {
                hits += q.clamp_step_size() as usize;
            }
            if let Some(a) = &mut layer.activation_quantizer {
                hits += a.state.clamp_step_size() as usize;
            }
        }
        hits
    }

    pub fn forward<'t>(&mut self, tape: &'t Tape, x: Var<'t>, mode: &mut ForwardMode<'_>) -> Result<Forward<'t>> {
        let mut params = Vec::new();
        let xs = x.shape();
        let per_sample: usize = self.spec.input_shape.iter().product();
        if xs.len() < 2 || xs[1..].iter().product::<usize>() != per_sample {
            return Err(Error::Shape {
                op: "model input",
                lhs: xs,
                rhs: self.spec.input_shape.clone(),
            });
        }
        let logits = match &mut self.net {
            Net::Mlp(layers) => {
                let n = xs[0];
                let mut h = x.reshape(&[n, xs[1..].iter().product()])?;
                let last = layers.len() - 1;
                for (i, l) in layers.iter_mut().enumerate() {
                    h = l.forward(tape, h, mode, &mut params)?;
                    if i != last {
                        h = h.relu();
                    }
                }
                h
            }
            Net::ResNet(r) => {
                let mut shape = vec![xs[0]];
                shape.extend(&self.spec.input_shape);
                let x = x.reshape(&shape)?;
                let train = mode.train;
                let h = r.stem.forward(tape, x, mode, &mut params)?;
                let mut h = r.stem_bn.forward(tape, h, train, &mut params)?.relu();
                for block in r.stages.iter_mut().flatten() {
                    h = block.forward(tape, h, mode, &mut params)?;
                }
                let pooled = h.global_avg_pool()?;
                r.fc.forward(tape, pooled, mode, &mut params)?
            }
        };
        Ok(Forward { logits, params })
    }

    /// Inference-only logits (running statistics, no noise).
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&tape, xv, &mut ForwardMode::eval())?;
        Ok((*out.logits.value()).clone())
    }

    /// Every parameter and buffer, plus quantizer metadata records
    /// (`<layer>.quantizer`, `<layer>.act_quantizer`).
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.clone().visit(&mut |s| {
            let t = Tensor::new(s.shape, s.data.to_vec()).expect("slot shape matches data");
            ck.push(s.name, t);
        });
        for view in self.layers() {
            if let Some(q) = &view.layer.quantizer {
                ck.push(format!("{}.quantizer", view.name), encode_quantizer(q, true));
            }
            if let Some(a) = &view.layer.activation_quantizer {
                ck.push(format!("{}.act_quantizer", view.name), encode_quantizer(&a.state, a.initialized));
            }
        }
        ck
    }

    /// Restores a checkpoint written by [`Model::to_checkpoint`] for the same
    /// spec, including quantizer state.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let names: Vec<String> = self.layers().iter().map(|v| v.name.clone()).collect();
        for (name, layer) in names.iter().zip(self.layers_mut()) {
            layer.quantizer = ck
                .get(&format!("{name}.quantizer"))
                .map(|t| decode_quantizer(name, t).map(|(q, _)| q))
                .transpose()?;
            layer.activation_quantizer = ck
                .get(&format!("{name}.act_quantizer"))
                .map(|t| {
                    decode_quantizer(name, t).map(|(state, initialized)| ActivationQuantizer { state, initialized })
                })
                .transpose()?;
        }
        self.load_tensors(ck, true)
    }

    /// Copies weights, biases and buffers by name. Step sizes are only
    /// required when `with_steps` is set.
    fn load_tensors(&mut self, ck: &Checkpoint, with_steps: bool) -> Result<()> {
        let mut failure = None;
        self.visit(&mut |s| {
            if failure.is_some() || (!with_steps && s.kind == SlotKind::Param(ParamKind::StepSize)) {
                return;
            }
            match ck.get(&s.name) {
                None => {
                    failure = Some(Error::Checkpoint {
                        name: s.name,
                        message: "missing from checkpoint".into(),
                    })
                }
                Some(t) if t.shape() != s.shape.as_slice() => {
                    failure = Some(Error::Checkpoint {
                        message: format!("shape {:?} in checkpoint, model expects {:?}", t.shape(), s.shape),
                        name: s.name,
                    })
                }
                Some(t) => s.data.copy_from_slice(t.data()),
            }
        });
        failure.map_or(Ok(()), Err)
    }
}

/// Loads full-precision weights and switches on quantization-aware training
/// with step sizes initialized from the loaded weights.
pub fn load_fp_then_enable_qat(
    model: &mut Model,
    checkpoint: &Checkpoint,
    bits: u32,
    policy: &NoisePolicy,
    quantize_activations: bool,
) -> Result<()> {
    model.disable_qat();
    model.load_tensors(checkpoint, false)?;
    model.enable_qat(bits, policy, quantize_activations)
}

fn encode_quantizer(q: &QuantizerState, initialized: bool) -> Tensor {
    Tensor::from_vec(vec![
        q.bits as f64,
        q.signed as u8 as f64,
        q.q_low as f64,
        q.q_high as f64,
        q.step_size,
        q.noise_scale,
        q.decay_rate,
        initialized as u8 as f64,
    ])
}

fn decode_quantizer(name: &str, t: &Tensor) -> Result<(QuantizerState, bool)> {
    let bad = |message: String| Error::Checkpoint {
        name: format!("{name}.quantizer"),
        message,
    };
    let d = t.data();
    if d.len() != 8 {
        return Err(bad(format!("expected 8 metadata values, found {}", d.len())));
    }
    let q = QuantizerState::new(d[0] as u32, d[1] != 0.0, d[4])
        .and_then(|q| q.with_noise(d[5], d[6]))
        .map_err(|e| bad(e.to_string()))?;
    if q.q_low as f64 != d[2] || q.q_high as f64 != d[3] {
        return Err(bad(format!("code range [{}, {}] inconsistent with {} bits", d[2], d[3], d[0])));
    }
    Ok((q, d[7] != 0.0))
}
