//! Flat `key = value` run description.
//!
//! One key per line, `#` starts a comment. Every key has a type and a
//! default; unknown or repeated keys are errors. [`ExperimentConfig::to_text`]
//! writes every key, so a saved config reproduces its run on its own.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data_io::{AugmentationPolicy, Normalization};
use crate::error::{Error, Result};
use crate::evaluation::SharpnessConfig;
use crate::models::{Architecture, ModelSpec};
use crate::noise_policy::NoisePolicy;
use crate::optim::{LrSchedule, ScheduleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    SyntheticImages,
    SyntheticGaussian,
    Cifar10,
    Idx,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::SyntheticImages => "synthetic-images",
            DatasetKind::SyntheticGaussian => "synthetic-gaussian",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Idx => "idx",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-images" => Ok(Self::SyntheticImages),
            "synthetic-gaussian" => Ok(Self::SyntheticGaussian),
            "cifar10" => Ok(Self::Cifar10),
            "idx" => Ok(Self::Idx),
            _ => Err(Error::Config(format!(
                "unknown dataset `{s}` (expected synthetic-images, synthetic-gaussian, cifar10 or idx)"
            ))),
        }
    }
}

/// Text conversion for config values.
trait Value: Sized {
    fn parse(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self> {
                s.parse().map_err(|_| Error::Config(format!("cannot parse `{s}` as {}", stringify!($t))))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u32, u64, f64, String, Architecture, ScheduleKind, DatasetKind);

impl Value for bool {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "true" | "on" | "yes" | "1" => Ok(true),
            "false" | "off" | "no" | "0" => Ok(false),
            _ => Err(Error::Config(format!("cannot parse `{s}` as a boolean"))),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl<T: Value> Value for Vec<T> {
    fn parse(s: &str) -> Result<Self> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(T::parse)
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config {
    ($( $(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr; )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $( $(#[doc = $doc])* pub $key: $ty, )*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $( $key: $default, )* }
            }
        }

        impl ExperimentConfig {
            /// Every key with its one-line description, in file order.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[
                $( (stringify!($key), concat!($($doc),*)), )*
            ];

            /// Sets one key from text. Dashes in the key are read as underscores.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let key = key.trim().replace('-', "_");
                let value = value.trim();
                match key.as_str() {
                    $( stringify!($key) => {
                        self.$key = <$ty as Value>::parse(value)
                            .map_err(|e| Error::Config(format!("key `{key}`: {e}")))?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// `(key, rendered value)` for every key, in file order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![ $( (stringify!($key), Value::render(&self.$key)), )* ]
            }
        }
    };
}

config! {
    /// mlp or resnet-tiny
    architecture: Architecture = Architecture::ResnetTiny;
    /// MLP hidden sizes, comma separated
    hidden: Vec<usize> = vec![128];
    /// resnet-tiny first-stage channels (stages use 1x, 2x, 4x)
    width: usize = 16;
    /// basic blocks per resnet-tiny stage
    blocks_per_stage: usize = 2;
    /// quantize the first and last layers too
    quantize_first_last: bool = true;

    /// synthetic-images, synthetic-gaussian, cifar10 or idx
    dataset: DatasetKind = DatasetKind::SyntheticImages;
    /// cifar10: binary file or directory of data_batch_*.bin; idx: image file
    train_path: String = String::new();
    /// cifar10: binary file or directory with test_batch.bin; idx: image file
    test_path: String = String::new();
    /// idx: training label file
    train_labels_path: String = String::new();
    /// idx: test label file
    test_labels_path: String = String::new();
    /// training samples (0 keeps all loaded samples)
    train_size: usize = 5000;
    /// test samples (0 keeps all loaded samples)
    test_size: usize = 2000;
    /// average-pool images by this factor after loading
    downsample: usize = 1;
    /// per-channel pixel mean in [0, 1]; empty uses the dataset convention
    norm_mean: Vec<f64> = vec![];
    /// per-channel pixel std in [0, 1]; empty uses the dataset convention
    norm_std: Vec<f64> = vec![];
    /// seed of the synthetic task and its samples
    data_seed: u64 = 0;
    /// synthetic class count
    classes: usize = 10;
    /// synthetic-gaussian input dimension
    input_dim: usize = 32;
    /// synthetic-gaussian distance between class means
    margin: f64 = 4.0;
    /// synthetic-images pixel noise in texture units
    image_noise: f64 = 1.0;
    /// synthetic-images largest weight of the blended second-class texture
    image_distractor: f64 = 0.6;
    /// random-crop zero padding in pixels
    crop_padding: usize = 0;
    /// horizontal flip probability
    flip_prob: f64 = 0.0;

    /// weight bit-width for QAT
    bits: u32 = 4;
    /// tempering noise level c
    c: f64 = 0.2;
    /// tempering decay rate k
    k: f64 = 50.0;
    /// scale noise by lr / initial lr
    lr_coupling: bool = true;
    /// false bypasses the tempering code path entirely
    tempering: bool = true;
    /// also temper activation quantizers
    temper_activations: bool = false;
    /// attach activation quantizers
    quantize_activations: bool = false;

    /// QAT epochs
    epochs: usize = 30;
    /// mini-batch size
    batch_size: usize = 128;
    /// QAT initial learning rate
    lr: f64 = 0.01;
    /// constant, cosine, step or cosine-step
    schedule: ScheduleKind = ScheduleKind::CosineStep;
    /// epochs between step decays
    step_every: usize = 10;
    /// step-decay multiplier
    step_factor: f64 = 0.1;
    /// SGD momentum
    momentum: f64 = 0.9;
    /// weight decay on weights and biases (never on step sizes)
    weight_decay: f64 = 1e-4;
    /// learning-rate multiplier for step sizes
    step_size_lr_scale: f64 = 1.0;
    /// full-precision pretraining epochs
    pretrain_epochs: usize = 30;
    /// full-precision initial learning rate
    pretrain_lr: f64 = 0.1;
    /// run seed (initialization, shuffling, augmentation, noise)
    seed: u64 = 0;

    /// sharpness radii, comma separated; empty skips sharpness
    sharpness_rho: Vec<f64> = vec![];
    /// ascent steps per restart
    sharpness_steps: usize = 20;
    /// ascent step length as a fraction of rho
    sharpness_step_fraction: f64 = 0.1;
    /// restarts (the first starts at zero)
    sharpness_restarts: usize = 3;
    /// fixed batches from the front of the training set
    sharpness_batches: usize = 10;
    /// samples per sharpness batch
    sharpness_batch_size: usize = 128;

    /// run directory; empty derives one under the output root
    output_dir: String = String::new();
    /// full-precision checkpoint for QAT
    fp_checkpoint: String = String::new();
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim().replace('-', "_");
            if !seen.insert(key.clone()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            cfg.set(&key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(&e))))?;
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of [`Self::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Fills dataset-dependent defaults and checks ranges.
    pub fn resolve(&mut self) -> Result<()> {
        if self.norm_mean.is_empty() && self.norm_std.is_empty() {
            let n = match self.dataset {
                DatasetKind::Idx => Normalization::mnist(),
                DatasetKind::SyntheticGaussian => Normalization {
                    mean: vec![],
                    std: vec![],
                },
                DatasetKind::Cifar10 | DatasetKind::SyntheticImages => Normalization::cifar10(),
            };
            self.norm_mean = n.mean;
            self.norm_std = n.std;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=16).contains(&self.bits) {
            return bad(format!("bits must be in 2..=16, got {}", self.bits));
        }
        if !(0.0..1.0).contains(&self.c) {
            return bad(format!("c must be in [0, 1), got {}", self.c));
        }
        if !(self.k >= 0.0) {
            return bad(format!("k must be >= 0, got {}", self.k));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if self.downsample == 0 {
            return bad("downsample must be >= 1".into());
        }
        if self.norm_mean.len() != self.norm_std.len() {
            return bad("norm_mean and norm_std need the same length".into());
        }
        if self.sharpness_rho.iter().any(|&r| !(r >= 0.0)) {
            return bad("sharpness radii must be >= 0".into());
        }
        self.augmentation().validate()
    }

    pub fn model_spec(&self, input_shape: &[usize], num_classes: usize) -> ModelSpec {
        ModelSpec {
            architecture: self.architecture,
            input_shape: input_shape.to_vec(),
            hidden: self.hidden.clone(),
            width: self.width,
            blocks_per_stage: self.blocks_per_stage,
            num_classes,
            quantize_first_last: self.quantize_first_last,
        }
    }

    pub fn noise_policy(&self) -> NoisePolicy {
        NoisePolicy {
            c: self.c,
            k: self.k,
            lr_coupling: self.lr_coupling,
            enabled: self.tempering,
            apply_to_activations: self.temper_activations,
        }
    }

    pub fn qat_schedule(&self) -> LrSchedule {
        LrSchedule {
            kind: self.schedule,
            initial_lr: self.lr,
            total_epochs: self.epochs,
            step_every: self.step_every,
            step_factor: self.step_factor,
        }
    }

    pub fn pretrain_schedule(&self) -> LrSchedule {
        LrSchedule {
            initial_lr: self.pretrain_lr,
            total_epochs: self.pretrain_epochs,
            ..self.qat_schedule()
        }
    }

    pub fn augmentation(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            random_crop_padding: self.crop_padding,
            horizontal_flip_prob: self.flip_prob,
        }
    }

    pub fn normalization(&self) -> Normalization {
        Normalization {
            mean: self.norm_mean.clone(),
            std: self.norm_std.clone(),
        }
    }

    pub fn sharpness(&self, rho: f64) -> SharpnessConfig {
        SharpnessConfig {
            rho,
            ascent_steps: self.sharpness_steps,
            ascent_lr: rho * self.sharpness_step_fraction,
            batches: self.sharpness_batches,
            batch_size: self.sharpness_batch_size,
            restarts: self.sharpness_restarts,
            seed: self.seed,
        }
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("hidden", "64, 32").unwrap();
        cfg.set("sharpness-rho", "1e-3,5e-4").unwrap();
        cfg.set("c", "0.3").unwrap();
        cfg.resolve().unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(back.hidden, vec![64, 32]);
        assert_eq!(back.sharpness_rho, vec![1e-3, 5e-4]);
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        let e = ExperimentConfig::parse("noice_level = 0.2").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("noice_level"), "{e}");
        assert!(ExperimentConfig::parse("c = 0.1\nc = 0.2").is_err());
        assert!(ExperimentConfig::parse("just words").is_err());
    }

    #[test]
    fn values_are_typed_and_checked() {
        assert!(ExperimentConfig::parse("bits = four").is_err());
        assert!(ExperimentConfig::parse("bits = 1").is_err());
        assert!(ExperimentConfig::parse("c = 1.0").is_err());
        assert!(ExperimentConfig::parse("tempering = maybe").is_err());
        let cfg = ExperimentConfig::parse("# comment\n\nbits = 2  # trailing\ntempering = off\n").unwrap();
        assert_eq!(cfg.bits, 2);
        assert!(!cfg.tempering);
    }

    #[test]
    fn desk_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.lr, cfg.momentum, cfg.weight_decay), (30, 128, 0.01, 0.9, 1e-4));
        assert_eq!((cfg.schedule, cfg.step_every, cfg.step_factor), (ScheduleKind::CosineStep, 10, 0.1));
        assert_eq!((cfg.c, cfg.k, cfg.pretrain_lr), (0.2, 50.0, 0.1));
        assert_eq!(cfg.norm_mean, Normalization::cifar10().mean);
    }

    #[test]
    fn every_key_is_documented_and_settable() {
        let cfg = ExperimentConfig::default();
        let entries = cfg.entries();
        assert_eq!(entries.len(), ExperimentConfig::KEYS.len());
        for ((k, v), (doc_key, doc)) in entries.iter().zip(ExperimentConfig::KEYS) {
            assert_eq!(k, doc_key);
            assert!(!doc.is_empty());
            let mut c = ExperimentConfig::default();
            c.set(k, v).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }
}
