use super::{Node, Op};
use crate::tensor::{broadcast_index_map, col2im, gemm, numel, reduce_to_shape};

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn unary_grad(nodes: &[Node], grads: &mut [Option<Vec<f64>>], x: usize, g: &[f64], f: impl Fn(usize, f64) -> f64) {
    if nodes[x].requires_grad {
        let gx = g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
        accumulate(nodes, grads, x, gx);
    }
}

/// Values of `id` broadcast to `out_shape`.
fn broadcast_values(nodes: &[Node], id: usize, out_shape: &[usize]) -> Vec<f64> {
    let v = &nodes[id].value;
    if v.shape() == out_shape {
        return v.data().to_vec();
    }
    broadcast_index_map(v.shape(), out_shape)
        .into_iter()
        .map(|j| v.data()[j])
        .collect()
}

fn binary_grad(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    a: usize,
    b: usize,
    g: &[f64],
    da: impl Fn(f64, f64, f64) -> f64,
    db: impl Fn(f64, f64, f64) -> f64,
) {
    let out_shape = nodes[id].value.shape().to_vec();
    let av = broadcast_values(nodes, a, &out_shape);
    let bv = broadcast_values(nodes, b, &out_shape);
    for (target, f) in [(a, &da as &dyn Fn(f64, f64, f64) -> f64), (b, &db)] {
        if !nodes[target].requires_grad {
            continue;
        }
        let full: Vec<f64> = (0..g.len()).map(|i| f(g[i], av[i], bv[i])).collect();
        let reduced = reduce_to_shape(&full, &out_shape, nodes[target].value.shape());
        accumulate(nodes, grads, target, reduced);
    }
}

/// Pushes the gradient `g` of node `id` onto its inputs.
pub(super) fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => binary_grad(nodes, grads, id, *a, *b, g, |g, _, _| g, |g, _, _| g),
        Op::Sub(a, b) => binary_grad(nodes, grads, id, *a, *b, g, |g, _, _| g, |g, _, _| -g),
        Op::Mul(a, b) => binary_grad(nodes, grads, id, *a, *b, g, |g, _, b| g * b, |g, a, _| g * a),
        Op::Div(a, b) => binary_grad(
            nodes,
            grads,
            id,
            *a,
            *b,
            g,
            |g, _, b| g / b,
            |g, a, b| -g * a / (b * b),
        ),
        Op::Neg(x) => unary_grad(nodes, grads, *x, g, |_, g| -g),
        Op::Scale(x, k) | Op::GradScale(x, k) => unary_grad(nodes, grads, *x, g, |_, g| g * k),
        Op::Offset(x) | Op::RoundSte(x) | Op::Reshape(x) => {
            unary_grad(nodes, grads, *x, g, |_, g| g)
        }
        Op::Exp(x) => unary_grad(nodes, grads, *x, g, |i, g| g * out.data()[i]),
        Op::Sqrt(x) => unary_grad(nodes, grads, *x, g, |i, g| g * 0.5 / out.data()[i]),
        Op::Abs(x) => {
            let xv = &nodes[*x].value;
            unary_grad(nodes, grads, *x, g, |i, g| {
                let v = xv.data()[i];
                if v > 0.0 {
                    g
                } else if v < 0.0 {
                    -g
                } else {
                    0.0
                }
            })
        }
        Op::Clip { x, lo, hi } => {
            let xv = &nodes[*x].value;
            unary_grad(nodes, grads, *x, g, |i, g| {
                let v = xv.data()[i];
                if v >= *lo && v <= *hi {
                    g
                } else {
                    0.0
                }
            })
        }
        Op::Relu(x) => {
            let xv = &nodes[*x].value;
            unary_grad(nodes, grads, *x, g, |i, g| if xv.data()[i] > 0.0 { g } else { 0.0 })
        }
        Op::Sum(x) => {
            let n = nodes[*x].value.len();
            unary_grad(nodes, grads, *x, &vec![g[0]; n], |_, g| g)
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.len();
            unary_grad(nodes, grads, *x, &vec![g[0] / n as f64; n], |_, g| g)
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[*a].requires_grad {
                // dA = G · Bᵀ
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, bv.data(), true, &mut ga, 0.0);
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                // dB = Aᵀ · G
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, av.data(), true, g, false, &mut gb, 0.0);
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let n = labels.len();
            let c = probs.shape()[1];
            let scale = if n == 0 { 0.0 } else { g[0] / n as f64 };
            let mut gl: Vec<f64> = probs.data().iter().map(|p| p * scale).collect();
            for (i, &l) in labels.iter().enumerate() {
                gl[i * c + l] -= scale;
            }
            accumulate(nodes, grads, *logits, gl);
        }
        Op::Conv2d { x, w, geom, cols } => {
            let xs = nodes[*x].value.shape().to_vec();
            let wv = &nodes[*w].value;
            let (n, cout) = (xs[0], wv.shape()[0]);
            let (plen, spatial) = (geom.patch_len(), geom.out_height() * geom.out_width());
            if nodes[*w].requires_grad {
                let mut gw = vec![0.0; cout * plen];
                for i in 0..n {
                    let gi = &g[i * cout * spatial..(i + 1) * cout * spatial];
                    let ci = &cols[i * plen * spatial..(i + 1) * plen * spatial];
                    gemm(cout, spatial, plen, gi, false, ci, true, &mut gw, 1.0);
                }
                accumulate(nodes, grads, *w, gw);
            }
            if nodes[*x].requires_grad {
                let img_len = numel(&xs[1..]);
                let mut gx = vec![0.0; n * img_len];
                let mut dcols = vec![0.0; plen * spatial];
                for i in 0..n {
                    let gi = &g[i * cout * spatial..(i + 1) * cout * spatial];
                    gemm(plen, cout, spatial, wv.data(), true, gi, false, &mut dcols, 0.0);
                    col2im(&dcols, geom, &mut gx[i * img_len..(i + 1) * img_len]);
                }
                accumulate(nodes, grads, *x, gx);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let xs = xhat.shape();
            let (n, c) = (xs[0], xs[1]);
            let spatial: usize = xs[2..].iter().product();
            let count = (n * spatial) as f64;
            let gv = &nodes[*gamma].value;
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * spatial;
                    for j in base..base + spatial {
                        sum_g[ch] += g[j];
                        sum_gx[ch] += g[j] * xhat.data()[j];
                    }
                }
            }
            if nodes[*x].requires_grad {
                let mut gx = vec![0.0; g.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let k = gv.data()[ch] * inv_std[ch];
                        let base = (i * c + ch) * spatial;
                        for j in base..base + spatial {
                            gx[j] = if *batch_stats {
                                k * (g[j] - sum_g[ch] / count - xhat.data()[j] * sum_gx[ch] / count)
                            } else {
                                k * g[j]
                            };
                        }
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
            accumulate(nodes, grads, *gamma, sum_gx);
            accumulate(nodes, grads, *beta, sum_g);
        }
        Op::GlobalAvgPool(x) => {
            let xs = nodes[*x].value.shape();
            let spatial = xs[2] * xs[3];
            let inv = 1.0 / spatial as f64;
            let gx = g
                .iter()
                .flat_map(|&gi| std::iter::repeat_n(gi * inv, spatial))
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
    }
}
