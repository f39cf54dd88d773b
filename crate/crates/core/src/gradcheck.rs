//! Finite-difference gradient oracle.
//!
//! Only forward evaluations are used, so the oracle stays independent of the
//! reverse pass it checks.

use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function at `x`.
pub fn central_difference(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for (i, gi) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *gi = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as x")
}

/// Largest elementwise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let g = central_difference(|t| t.data().iter().map(|v| v * v * v).sum(), &x, 1e-5);
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 3.0 * xi * xi).abs() < 1e-8);
        }
    }
}
