use std::rc::Rc;

use super::{Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_index_map, broadcast_shape, gemm, im2col, matmul_dims, numel, ConvGeometry, Tensor,
};

/// Result of a batch-norm forward pass. `batch_mean`/`batch_var` are the
/// per-channel statistics used for normalization (biased variance) and are
/// only meaningful in batch-statistics mode.
pub struct BatchNormOutput<'t> {
    pub out: Var<'t>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

fn binary(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape()).map_err(|_| Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let ia = broadcast_index_map(a.shape(), &shape);
    let ib = broadcast_index_map(b.shape(), &shape);
    let (da, db) = (a.data(), b.data());
    let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
    Tensor::new(shape, data)
}

impl<'t> Var<'t> {
    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, op, &[self.id])
    }

    fn binary_op(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let v = binary(&self.value(), &other.value(), name, f)?;
        Ok(self.tape.push(v, op, &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Elementwise division; a zero divisor yields infinities per IEEE-754.
    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), |x| x * k)
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `k`.
    pub fn grad_scale(&self, k: f64) -> Var<'t> {
        self.unary(Op::GradScale(self.id, k), |x| x)
    }

    pub fn offset(&self, k: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |x| x + k)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    /// Clamps to `[lo, hi]`; the gradient is 1 inside the closed interval and
    /// 0 outside it.
    pub fn clip(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clip { x: self.id, lo, hi }, |x| x.clamp(lo, hi))
    }

    /// Rounds half away from zero; the backward pass is the identity.
    pub fn round_ste(&self) -> Var<'t> {
        self.unary(Op::RoundSte(self.id), f64::round)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Identity forward, no gradient backward.
    pub fn stop_gradient(&self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id), &[self.id]))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self
            .tape
            .push(v, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().mean());
        self.tape.push(v, Op::Mean(self.id), &[self.id])
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class indices.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let logits = self.value();
        let shape = logits.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: shape.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label { label, classes: c });
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (i, row) in logits.data().chunks(c).enumerate() {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let p = &mut probs[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            loss += z.ln() + max - row[labels[i]];
        }
        let loss = if n == 0 { 0.0 } else { loss / n as f64 };
        let op = Op::SoftmaxCrossEntropy {
            logits: self.id,
            labels: labels.into(),
            probs: Rc::new(Tensor::new(vec![n, c], probs)?),
        };
        Ok(self.tape.push(Tensor::scalar(loss), op, &[self.id]))
    }

    /// 2-D convolution of NCHW input with `[C_out, C_in, k, k]` weights.
    pub fn conv2d(&self, weight: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let geom = ConvGeometry {
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            padding,
        };
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[2] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (n, cout) = (xs[0], ws[0]);
        let (plen, spatial) = (geom.patch_len(), geom.out_height() * geom.out_width());
        let img_len = numel(&xs[1..]);
        let mut cols = vec![0.0; n * plen * spatial];
        let mut out = vec![0.0; n * cout * spatial];
        for i in 0..n {
            let c = &mut cols[i * plen * spatial..(i + 1) * plen * spatial];
            im2col(&x.data()[i * img_len..(i + 1) * img_len], &geom, c);
            gemm(
                cout,
                plen,
                spatial,
                w.data(),
                false,
                c,
                false,
                &mut out[i * cout * spatial..(i + 1) * cout * spatial],
                0.0,
            );
        }
        let v = Tensor::new(vec![n, cout, geom.out_height(), geom.out_width()], out)?;
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            geom,
            cols: Rc::new(cols),
        };
        Ok(self.tape.push(v, op, &[self.id, weight.id]))
    }

    /// Batch normalization over NCHW (or NC) input.
    ///
    /// With `running = None` the batch's own statistics are used and
    /// gradients flow through them; otherwise the supplied `(mean, var)` are
    /// treated as constants.
    pub fn batch_norm(
        &self,
        gamma: Var<'t>,
        beta: Var<'t>,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<BatchNormOutput<'t>> {
        let x = self.value();
        let xs = x.shape();
        if xs.len() != 4 && xs.len() != 2 {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: xs.to_vec(),
                rhs: gamma.shape(),
            });
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let (g, b) = (gamma.value(), beta.value());
        if g.len() != c || b.len() != c {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: xs.to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let count = (n * spatial) as f64;
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        for &v in &x.data()[base..base + spatial] {
                            s += v;
                        }
                    }
                    let mu = s / count;
                    let mut ss = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        for &v in &x.data()[base..base + spatial] {
                            ss += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = ss / count;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for j in base..base + spatial {
                    let h = (x.data()[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = h * g.data()[ch] + b.data()[ch];
                }
            }
        }
        let op = Op::BatchNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat: Rc::new(Tensor::new(xs.to_vec(), xhat)?),
            inv_std: Rc::new(inv_std),
            batch_stats: running.is_none(),
        };
        let out = self
            .tape
            .push(Tensor::new(xs.to_vec(), out)?, op, &[self.id, gamma.id, beta.id]);
        Ok(BatchNormOutput {
            out,
            batch_mean: mean,
            batch_var: var,
        })
    }

    /// Averages NCHW input over its spatial axes, giving `[N, C]`.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let x = self.value();
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::Shape {
                op: "global_avg_pool",
                lhs: xs.to_vec(),
                rhs: vec![],
            });
        }
        let spatial = xs[2] * xs[3];
        let data = x
            .data()
            .chunks(spatial)
            .map(|p| p.iter().fold(0.0, |a, &v| a + v) / spatial as f64)
            .collect();
        let v = Tensor::new(vec![xs[0], xs[1]], data)?;
        Ok(self.tape.push(v, Op::GlobalAvgPool(self.id), &[self.id]))
    }
}
