//! Dataset ingestion, synthetic tasks and mini-batch streaming.

mod batches;
mod formats;
mod synthetic;

pub use batches::{minibatches, AugmentationPolicy, Batch};
pub use formats::{
    cifar_bytes, idx_bytes, load_cifar_binary, load_idx, parse_cifar_binary, parse_idx,
    parse_idx_pair, write_cifar_binary, write_idx, CIFAR_CLASSES, CIFAR_RECORD, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
};
pub use synthetic::{synthetic_gaussian_classification, synthetic_images, SyntheticImageSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Checkpoint, DType};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Undecoded 8-bit images with labels, channel-major per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl RawImages {
    pub fn new(n: usize, [c, h, w]: [usize; 3], pixels: Vec<u8>, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if pixels.len() != n * c * h * w || labels.len() != n {
            return Err(Error::Param(format!(
                "{n} samples of {c}×{h}×{w} need {} pixels and {n} labels, got {} and {}",
                n * c * h * w,
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Label {
                label: bad as usize,
                classes: num_classes,
            });
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            pixels,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            pixels: self.pixels[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// Scales pixels to `[0, 1]` and standardizes each channel.
    pub fn normalize(&self, norm: &Normalization) -> Result<Dataset> {
        let c = self.channels;
        if norm.mean.len() != c || norm.std.len() != c {
            return Err(Error::Config(format!(
                "normalization has {} means / {} stds for {c} channels",
                norm.mean.len(),
                norm.std.len()
            )));
        }
        if norm.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        let plane = self.height * self.width;
        let data = self
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let ch = (i / plane) % c;
                (p as f64 / 255.0 - norm.mean[ch]) / norm.std[ch]
            })
            .collect();
        Ok(Dataset {
            images: Tensor::new(vec![self.len(), c, self.height, self.width], data)?,
            labels: self.labels.iter().map(|&l| l as usize).collect(),
            num_classes: self.num_classes,
            split: Split::Train,
        })
    }

    /// Averages non-overlapping `factor × factor` pixel blocks.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Param(format!(
                "cannot downsample {}×{} by {factor}",
                self.height, self.width
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let area = (factor * factor) as u32;
        let mut pixels = Vec::with_capacity(self.len() * self.channels * h * w);
        for plane in self.pixels.chunks_exact(self.height * self.width) {
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0u32;
                    for dy in 0..factor {
                        let row = (y * factor + dy) * self.width + x * factor;
                        sum += plane[row..row + factor].iter().map(|&p| p as u32).sum::<u32>();
                    }
                    pixels.push(((sum + area / 2) / area) as u8);
                }
            }
        }
        Ok(Self {
            height: h,
            width: w,
            pixels,
            ..self.clone()
        })
    }

    /// Stores pixels (as `u8` values in an i64 record) and labels in the
    /// checkpoint container.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let px = self.pixels.iter().map(|&p| p as f64).collect();
        let shape = vec![self.len(), self.channels, self.height, self.width];
        ck.push_typed("pixels", DType::I64, Tensor::new(shape, px).expect("consistent shape"));
        ck.push_typed("labels", DType::I64, Tensor::from_vec(self.labels.iter().map(|&l| l as f64).collect()));
        ck.push_typed("num_classes", DType::I64, Tensor::scalar(self.num_classes as f64));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |name: &str| {
            ck.get(name).ok_or_else(|| Error::Checkpoint {
                name: name.into(),
                message: "missing from dataset container".into(),
            })
        };
        let px = get("pixels")?;
        if px.rank() != 4 {
            return Err(Error::Checkpoint {
                name: "pixels".into(),
                message: format!("expected rank 4, found {:?}", px.shape()),
            });
        }
        let byte = |v: f64| u8::try_from(v as i64).map_err(|_| Error::Param(format!("{v} is not a byte")));
        let s = px.shape();
        Self::new(
            s[0],
            [s[1], s[2], s[3]],
            px.data().iter().map(|&v| byte(v)).collect::<Result<_>>()?,
            get("labels")?.data().iter().map(|&v| byte(v)).collect::<Result<_>>()?,
            get("num_classes")?.item()? as usize,
        )
    }
}

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn mnist() -> Self {
        Self {
            mean: vec![0.1307],
            std: vec![0.3081],
        }
    }

    pub fn cifar10() -> Self {
        Self {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }
}

/// Normalized samples, `N × C × H × W` (or `N × D`), with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label: bad,
                classes: num_classes,
            });
        }
        if !images.all_finite() {
            return Err(Error::Param("dataset contains non-finite values".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split: Split::Train,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Copies the samples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Param(format!("sample index {i} out of range for {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// First `n` samples.
    pub fn subset(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx)?;
        Ok(Self {
            images,
            labels,
            num_classes: self.num_classes,
            split: self.split,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_averages_blocks() {
        let raw = RawImages::new(1, [1, 2, 4], vec![0, 2, 10, 10, 4, 6, 10, 11], vec![0], 2).unwrap();
        let d = raw.downsample(2).unwrap();
        assert_eq!((d.height, d.width), (1, 2));
        assert_eq!(d.pixels, vec![3, 10]);
        assert!(raw.downsample(3).is_err());
    }

    #[test]
    fn raw_checkpoint_round_trip() {
        let raw = RawImages::new(2, [1, 2, 2], vec![0, 1, 254, 255, 7, 8, 9, 10], vec![1, 0], 2).unwrap();
        let ck = Checkpoint::from_bytes(&raw.to_checkpoint().to_bytes()).unwrap();
        assert_eq!(RawImages::from_checkpoint(&ck).unwrap(), raw);
    }

    #[test]
    fn label_validation() {
        assert!(RawImages::new(1, [1, 1, 1], vec![0], vec![5], 5).is_err());
        assert!(Dataset::new(Tensor::zeros(&[1, 2]), vec![3], 3).is_err());
        assert!(Dataset::new(Tensor::full(&[1, 2], f64::NAN), vec![0], 3).is_err());
    }

    #[test]
    fn normalization_channel_count_must_match() {
        let raw = RawImages::new(1, [1, 1, 1], vec![0], vec![0], 2).unwrap();
        assert!(raw.normalize(&Normalization::cifar10()).is_err());
    }
}
