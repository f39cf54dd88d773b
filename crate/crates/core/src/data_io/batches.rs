use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, RandomSource};
use crate::tensor::Tensor;

/// Random crop (zero padding, then a same-size window) and horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub random_crop_padding: usize,
    pub horizontal_flip_prob: f64,
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        Self {
            random_crop_padding: 0,
            horizontal_flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(Error::Param(format!(
                "flip probability must be in [0, 1], got {}",
                self.horizontal_flip_prob
            )));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.random_crop_padding == 0 && self.horizontal_flip_prob == 0.0
    }

    /// Augments one `C × H × W` sample in place.
    fn apply(&self, sample: &mut [f64], [c, h, w]: [usize; 3], rng: &mut RandomSource) {
        let p = self.random_crop_padding;
        if p > 0 {
            let oy = rng.below(2 * p + 1) as isize - p as isize;
            let ox = rng.below(2 * p + 1) as isize - p as isize;
            let src = sample.to_vec();
            for ch in 0..c {
                for r in 0..h {
                    for col in 0..w {
                        let (sr, sc) = (r as isize + oy, col as isize + ox);
                        let inside = sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w;
                        sample[(ch * h + r) * w + col] = if inside {
                            src[(ch * h + sr as usize) * w + sc as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
        if self.horizontal_flip_prob > 0.0 && rng.uniform() < self.horizontal_flip_prob {
            for row in sample.chunks_exact_mut(w) {
                row.reverse();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Dataset positions of the samples, in batch order.
    pub indices: Vec<usize>,
}

/// One epoch of shuffled mini-batches; the last batch may be short.
///
/// The order depends only on `(seed, epoch)`, and each sample's augmentation
/// on `(seed, epoch, sample index)`, so results do not depend on how batches
/// are consumed.
pub fn minibatches<'a>(
    data: &'a Dataset,
    batch_size: usize,
    augmentation: &AugmentationPolicy,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    if batch_size == 0 {
        return Err(Error::Param("batch size must be >= 1".into()));
    }
    if batch_size > data.len() {
        return Err(Error::Param(format!(
            "batch size {batch_size} exceeds dataset size {}",
            data.len()
        )));
    }
    augmentation.validate()?;
    let aug = *augmentation;
    if !aug.is_identity() && data.sample_shape().len() != 3 {
        return Err(Error::Param("augmentation needs C × H × W samples".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    RandomSource::derive(seed, &[stream::SHUFFLE, epoch]).shuffle(&mut order);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |indices| {
        let (mut images, labels) = data.gather(&indices)?;
        if !aug.is_identity() {
            let s = data.sample_shape();
            let dims = [s[0], s[1], s[2]];
            let per = s.iter().product::<usize>();
            for (sample, &i) in images.data_mut().chunks_exact_mut(per).zip(&indices) {
                let mut rng = RandomSource::derive(seed, &[stream::AUGMENT, epoch, i as u64]);
                aug.apply(sample, dims, &mut rng);
            }
        }
        Ok(Batch {
            images,
            labels,
            indices,
        })
    }))
}
