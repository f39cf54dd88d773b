//! Shared fixtures for the kernel benchmarks.

use qtemper::{RandomSource, Tensor};

/// Standard-normal tensor from a fixed seed.
pub fn normal_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    RandomSource::new(seed).fill_normal(t.data_mut());
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_seeded() {
        assert_eq!(normal_tensor(&[3, 4], 1), normal_tensor(&[3, 4], 1));
        assert_ne!(normal_tensor(&[3, 4], 1), normal_tensor(&[3, 4], 2));
    }
}
