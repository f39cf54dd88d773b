use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{DatasetKind, ExperimentConfig};
use crate::autodiff::Tape;
use crate::data_io::{
    load_cifar_binary, load_idx, minibatches, synthetic_gaussian_classification, synthetic_images, Dataset,
    RawImages, Split, SyntheticImageSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, sharpness, telemetry_snapshot, MetricsRow};
use crate::models::{ForwardMode, Model};
use crate::noise_policy::NoisePolicy;
use crate::optim::{LrSchedule, OptimizerState};
use crate::rng::{derive_seed, stream, RandomSource};
use crate::tensor::Tensor;

/// Loads, subsamples, downsamples and normalizes the train and test splits.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    if cfg.dataset == DatasetKind::SyntheticGaussian {
        if cfg.train_size == 0 || cfg.test_size == 0 {
            return Err(Error::Config("synthetic data needs train_size and test_size > 0".into()));
        }
        let seed = |split| derive_seed(cfg.data_seed, &[stream::DATA, split]);
        let g = |n, s| synthetic_gaussian_classification(cfg.classes, cfg.input_dim, n, cfg.margin, s);
        let train = g(cfg.train_size, seed(0))?;
        let test = g(cfg.test_size, seed(1))?.with_split(Split::Test);
        return Ok((train, test));
    }
    let (train, test) = load_raw(cfg)?;
    let prep = |raw: RawImages, n: usize, split| -> Result<Dataset> {
        let raw = if n == 0 { raw } else { raw.take(n) };
        Ok(raw.downsample(cfg.downsample)?.normalize(&cfg.normalization())?.with_split(split))
    };
    Ok((prep(train, cfg.train_size, Split::Train)?, prep(test, cfg.test_size, Split::Test)?))
}

fn load_raw(cfg: &ExperimentConfig) -> Result<(RawImages, RawImages)> {
    let need = |p: &str, key: &str| {
        if p.is_empty() {
            Err(Error::Config(format!("dataset {} needs `{key}`", cfg.dataset)))
        } else {
            Ok(Path::new(p).to_path_buf())
        }
    };
    match cfg.dataset {
        DatasetKind::SyntheticImages => {
            if cfg.train_size == 0 || cfg.test_size == 0 {
                return Err(Error::Config("synthetic data needs train_size and test_size > 0".into()));
            }
            let spec = SyntheticImageSpec {
                classes: cfg.classes,
                noise: cfg.image_noise,
                distractor: cfg.image_distractor,
                ..SyntheticImageSpec::cifar_like(cfg.data_seed)
            };
            let seed = |split| derive_seed(cfg.data_seed, &[stream::DATA, split]);
            Ok((
                synthetic_images(&spec, cfg.train_size, seed(0))?,
                synthetic_images(&spec, cfg.test_size, seed(1))?,
            ))
        }
        DatasetKind::Cifar10 => Ok((
            load_cifar_split(&need(&cfg.train_path, "train_path")?, true)?,
            load_cifar_split(&need(&cfg.test_path, "test_path")?, false)?,
        )),
        DatasetKind::Idx => Ok((
            load_idx(&need(&cfg.train_path, "train_path")?, &need(&cfg.train_labels_path, "train_labels_path")?)?,
            load_idx(&need(&cfg.test_path, "test_path")?, &need(&cfg.test_labels_path, "test_labels_path")?)?,
        )),
        DatasetKind::SyntheticGaussian => unreachable!("handled by load_datasets"),
    }
}

/// A single binary file, or a directory holding the standard batch files.
fn load_cifar_split(path: &Path, train: bool) -> Result<RawImages> {
    if !path.is_dir() {
        return load_cifar_binary(path);
    }
    let files: Vec<String> = if train {
        (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
    } else {
        vec!["test_batch.bin".into()]
    };
    let mut out: Option<RawImages> = None;
    for f in files {
        let part = load_cifar_binary(&path.join(f))?;
        match &mut out {
            None => out = Some(part),
            Some(acc) => {
                acc.pixels.extend(part.pixels);
                acc.labels.extend(part.labels);
            }
        }
    }
    Ok(out.expect("at least one batch file"))
}

/// Per-epoch noise telemetry of a QAT run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub epoch: usize,
    pub lr: f64,
    pub policy_scale: f64,
    /// Mean over quantized layers of the mean |Q(w) - w|.
    pub mean_abs_qerr: f64,
    /// Mean over quantized layers of the injected noise std, including the
    /// learning-rate coupling.
    pub mean_noise_std: f64,
}

pub fn write_noise_csv(out: impl std::io::Write, rows: &[NoiseRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub metrics: Vec<MetricsRow>,
    pub noise: Vec<NoiseRow>,
    pub clamped_step_sizes: usize,
}

/// Settings of one training phase.
#[derive(Debug, Clone)]
pub struct Phase {
    pub schedule: LrSchedule,
    pub policy: NoisePolicy,
    /// Separates the shuffle streams of pretraining and QAT.
    pub stream: u64,
}

/// Mini-batch SGD over `schedule.total_epochs` epochs. Emits an epoch-0 test
/// row, then a train row (running averages) and a test row per epoch.
pub fn train(
    model: &mut Model,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &ExperimentConfig,
    phase: &Phase,
) -> Result<TrainLog> {
    let schedule = &phase.schedule;
    let mut opt = OptimizerState::new(cfg.momentum, cfg.weight_decay)?;
    opt.step_size_lr_scale = cfg.step_size_lr_scale;
    let shuffle_seed = derive_seed(cfg.seed, &[stream::SHUFFLE, phase.stream]);
    let mut temper_rng = RandomSource::derive(cfg.seed, &[stream::TEMPER, phase.stream]);
    let steps = train_data.len().div_ceil(cfg.batch_size);
    let scale_at = |lr| phase.policy.policy_scale(lr, schedule.initial_lr);

    let mut log = TrainLog::default();
    let lr0 = schedule.lr_at(0.0)?;
    log.metrics.push(test_row(model, test_data, 0, lr0, scale_at(lr0)?)?);
    if model.qat_enabled() {
        log.noise.push(noise_row(model, 0, lr0, scale_at(lr0)?)?);
    }

    for epoch in 1..=schedule.total_epochs {
        let lr_start = schedule.lr_at((epoch - 1) as f64)?;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let mut clamped = 0;
        let batches = minibatches(train_data, cfg.batch_size, &cfg.augmentation(), shuffle_seed, epoch as u64)?;
        for (step, batch) in batches.enumerate() {
            let batch = batch?;
            let lr = schedule.lr_at((epoch - 1) as f64 + step as f64 / steps as f64)?;
            let mut mode = ForwardMode::train(scale_at(lr)?, &mut temper_rng);
            mode.tempering = cfg.tempering;
            mode.temper_activations = cfg.temper_activations;

            let tape = Tape::new();
            let x = tape.constant(batch.images);
            let out = model.forward(&tape, x, &mut mode)?;
            let loss = out.logits.softmax_cross_entropy(&batch.labels)?;
            let loss_value = loss.value().item()?;
            let non_finite = Error::NonFinite { epoch, step };
            if !loss_value.is_finite() {
                return Err(non_finite);
            }
            let pred = out.logits.value().argmax_rows();
            correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
            seen += batch.labels.len();
            loss_sum += loss_value * batch.labels.len() as f64;

            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = out
                .params
                .iter()
                .map(|&p| grads.get(p).cloned().unwrap_or_else(|| Tensor::zeros(&p.shape())))
                .collect();
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(non_finite);
            }
            let mut result = Ok(());
            model.for_each_param_mut(|i, kind, data| {
                if result.is_ok() {
                    result = opt.update(i, kind, data, grads[i].data(), lr);
                }
            });
            result?;
            clamped += model.clamp_step_sizes();
        }
        if clamped > 0 {
            log::warn!("epoch {epoch}: step size clamped to its floor {clamped} times");
        }
        log.clamped_step_sizes += clamped;

        let scale = scale_at(lr_start)?;
        log.metrics.push(MetricsRow {
            epoch,
            split: Split::Train,
            top1: correct as f64 / seen as f64,
            loss: loss_sum / seen as f64,
            lr: lr_start,
            policy_scale: scale,
            layers: telemetry_snapshot(model)?,
            sharpness: None,
        });
        let row = test_row(model, test_data, epoch, lr_start, scale)?;
        log::info!(
            "epoch {epoch}/{}: lr {lr_start:.3e} train loss {:.4} top1 {:.4} | test loss {:.4} top1 {:.4}",
            schedule.total_epochs,
            loss_sum / seen as f64,
            correct as f64 / seen as f64,
            row.loss,
            row.top1
        );
        log.metrics.push(row);
        if model.qat_enabled() {
            log.noise.push(noise_row(model, epoch, lr_start, scale)?);
        }
    }
    Ok(log)
}

fn test_row(model: &Model, data: &Dataset, epoch: usize, lr: f64, policy_scale: f64) -> Result<MetricsRow> {
    let r = evaluate(model, data)?;
    Ok(MetricsRow {
        epoch,
        split: Split::Test,
        top1: r.top1,
        loss: r.loss,
        lr,
        policy_scale,
        layers: r.layers,
        sharpness: None,
    })
}

fn noise_row(model: &Model, epoch: usize, lr: f64, policy_scale: f64) -> Result<NoiseRow> {
    let q: Vec<_> = telemetry_snapshot(model)?.into_iter().filter_map(|l| l.quant).collect();
    let n = q.len().max(1) as f64;
    Ok(NoiseRow {
        epoch,
        lr,
        policy_scale,
        mean_abs_qerr: q.iter().map(|d| d.mean_abs_error).sum::<f64>() / n,
        mean_noise_std: policy_scale * q.iter().map(|d| d.mean_noise_std).sum::<f64>() / n,
    })
}

/// Sharpness at each configured radius on the front of the training set.
pub fn sharpness_sweep(model: &Model, train_data: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<(f64, f64)>> {
    cfg.sharpness_rho
        .iter()
        .map(|&rho| Ok((rho, sharpness(model, train_data, &cfg.sharpness(rho))?)))
        .collect()
}
