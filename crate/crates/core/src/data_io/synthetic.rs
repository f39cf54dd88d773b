use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Dataset, RawImages};
use crate::error::{Error, Result};
use crate::rng::{stream, RandomSource};
use crate::tensor::Tensor;

/// Class-conditional Gaussians with unit covariance. Class means sit on
/// scaled coordinate axes, so every pair of means is `margin` apart.
/// Labels are balanced and shuffled.
pub fn synthetic_gaussian_classification(
    classes: usize,
    dim: usize,
    n: usize,
    margin: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Param(format!("need at least 2 classes, got {classes}")));
    }
    if dim < classes {
        return Err(Error::Param(format!(
            "dimension {dim} too small to separate {classes} class means"
        )));
    }
    if !(margin >= 0.0) {
        return Err(Error::Param(format!("margin must be >= 0, got {margin}")));
    }
    let mut rng = RandomSource::derive(seed, &[stream::DATA]);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    let offset = margin / 2f64.sqrt();
    let mut data = vec![0.0; n * dim];
    for (row, &y) in data.chunks_exact_mut(dim).zip(&labels) {
        rng.fill_normal(row);
        row[y] += offset;
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}

/// Parameters of the synthetic image task: each class is a smooth random
/// texture; samples are shifted, rescaled copies blended with another
/// class's texture (shifted independently) and pixel noise. Samples whose
/// blend weight exceeds their gain are ambiguous, which caps accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImageSpec {
    pub classes: usize,
    pub channels: usize,
    pub side: usize,
    /// Seeds the class textures; train and test splits must share it.
    pub task_seed: u64,
    /// Pixel noise standard deviation, in texture units.
    pub noise: f64,
    /// Largest circular shift in pixels, each axis.
    pub max_shift: usize,
    /// Largest weight of the blended distractor texture.
    pub distractor: f64,
    pub waves: usize,
}

impl SyntheticImageSpec {
    /// 3×32×32, ten classes; CIFAR-10 record layout.
    pub fn cifar_like(task_seed: u64) -> Self {
        Self {
            classes: 10,
            channels: 3,
            side: 32,
            task_seed,
            noise: 1.0,
            max_shift: 3,
            distractor: 0.6,
            waves: 4,
        }
    }

    fn templates(&self) -> Vec<Vec<f64>> {
        let mut rng = RandomSource::derive(self.task_seed, &[stream::DATA, 0]);
        let plane = self.side * self.side;
        (0..self.classes)
            .map(|_| {
                let mut t = vec![0.0; self.channels * plane];
                for ch in 0..self.channels {
                    for _ in 0..self.waves {
                        let fx = rng.uniform_range(-3.0, 3.0);
                        let fy = rng.uniform_range(-3.0, 3.0);
                        let phase = rng.uniform_range(0.0, 2.0 * PI);
                        let amp = rng.uniform_range(0.5, 1.0);
                        for y in 0..self.side {
                            for x in 0..self.side {
                                let arg = 2.0 * PI * (fx * x as f64 + fy * y as f64) / self.side as f64;
                                t[ch * plane + y * self.side + x] += amp * (arg + phase).cos();
                            }
                        }
                    }
                }
                let n = t.len() as f64;
                let mean = t.iter().sum::<f64>() / n;
                let std = (t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                t.iter().map(|v| (v - mean) / std).collect()
            })
            .collect()
    }
}

/// Draws `n` samples of the task with balanced labels.
pub fn synthetic_images(spec: &SyntheticImageSpec, n: usize, sample_seed: u64) -> Result<RawImages> {
    if spec.classes < 2 || spec.classes > 256 || spec.channels == 0 || spec.side == 0 {
        return Err(Error::Param(format!("invalid synthetic image spec {spec:?}")));
    }
    let templates = spec.templates();
    let mut rng = RandomSource::derive(sample_seed, &[stream::DATA, 1]);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % spec.classes) as u8).collect();
    rng.shuffle(&mut labels);
    let side = spec.side;
    let plane = side * side;
    let mut pixels = Vec::with_capacity(n * spec.channels * plane);
    for &y in &labels {
        let y = y as usize;
        let other = (y + 1 + rng.below(spec.classes - 1)) % spec.classes;
        let blend = rng.uniform_range(0.0, spec.distractor);
        let gain = rng.uniform_range(0.7, 1.3);
        let span = 2 * spec.max_shift + 1;
        let dx = rng.below(span) + side - spec.max_shift;
        let dy = rng.below(span) + side - spec.max_shift;
        let ox = rng.below(span) + side - spec.max_shift;
        let oy = rng.below(span) + side - spec.max_shift;
        for ch in 0..spec.channels {
            for r in 0..side {
                for c in 0..side {
                    let src = ch * plane + ((r + dy) % side) * side + (c + dx) % side;
                    let v = gain * templates[y][src]
                        + blend * templates[other][ch * plane + ((r + oy) % side) * side + (c + ox) % side]
                        + spec.noise * rng.normal();
                    pixels.push((128.0 + 40.0 * v).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    RawImages::new(n, [spec.channels, side, side], pixels, labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_task_is_deterministic_and_balanced() {
        let a = synthetic_gaussian_classification(3, 5, 30, 2.0, 4).unwrap();
        let b = synthetic_gaussian_classification(3, 5, 30, 2.0, 4).unwrap();
        assert_eq!(a, b);
        for c in 0..3 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 10);
        }
        assert!(synthetic_gaussian_classification(1, 5, 10, 1.0, 0).is_err());
    }

    #[test]
    fn gaussian_means_are_margin_apart() {
        let d = synthetic_gaussian_classification(2, 2, 40_000, 3.0, 1).unwrap();
        let mut mean = [[0.0; 2]; 2];
        let mut count = [0.0; 2];
        for (row, &y) in d.images.data().chunks(2).zip(&d.labels) {
            mean[y][0] += row[0];
            mean[y][1] += row[1];
            count[y] += 1.0;
        }
        let dist = ((mean[0][0] / count[0] - mean[1][0] / count[1]).powi(2)
            + (mean[0][1] / count[0] - mean[1][1] / count[1]).powi(2))
        .sqrt();
        assert!((dist - 3.0).abs() < 0.05, "{dist}");
    }

    #[test]
    fn image_task_shares_templates_across_sample_seeds() {
        let spec = SyntheticImageSpec::cifar_like(3);
        let a = synthetic_images(&spec, 20, 1).unwrap();
        assert_eq!(a, synthetic_images(&spec, 20, 1).unwrap());
        assert_ne!(a, synthetic_images(&spec, 20, 2).unwrap());
        assert_eq!(a.sample_len(), 3072);
        let clean = SyntheticImageSpec {
            noise: 0.0,
            max_shift: 0,
            distractor: 0.0,
            ..spec
        };
        // Without nuisance factors, same-class samples differ only by gain.
        let b = synthetic_images(&clean, 20, 5).unwrap();
        let c = synthetic_images(&clean, 20, 6).unwrap();
        let i = b.labels.iter().position(|&l| l == 0).unwrap();
        let j = c.labels.iter().position(|&l| l == 0).unwrap();
        let corr = |p: &[u8], q: &[u8]| {
            let f = |v: &[u8]| v.iter().map(|&x| x as f64 - 128.0).collect::<Vec<_>>();
            let (p, q) = (f(p), f(q));
            let dot: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
            dot / (p.iter().map(|a| a * a).sum::<f64>() * q.iter().map(|a| a * a).sum::<f64>()).sqrt()
        };
        assert!(corr(&b.pixels[i * 3072..(i + 1) * 3072], &c.pixels[j * 3072..(j + 1) * 3072]) > 0.95);
    }
}
