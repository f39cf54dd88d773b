use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::{load_datasets, sharpness_sweep, train, write_noise_csv, Phase};
use crate::data_io::{Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::write_metrics_csv;
use crate::models::{build, load_fp_then_enable_qat, Checkpoint};
use crate::noise_policy::{log_grid, write_ratio_curve_csv, NoisePolicy};
use crate::rng::{stream, RandomSource};

pub const OUTPUT_ROOT_ENV: &str = "QTEMPER_OUTPUT_ROOT";
pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const NOISE_FILE: &str = "noise.csv";
pub const SHARPNESS_FILE: &str = "sharpness.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.qtck";
const LOCK_FILE: &str = ".lock";

/// What a finished run wrote and its headline numbers. File fields are
/// relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub config: String,
    pub metrics: String,
    pub metric_rows: usize,
    pub noise: Option<String>,
    pub sharpness: Option<String>,
    pub checkpoint: String,
    pub epochs: usize,
    pub final_top1: f64,
    pub final_loss: f64,
    /// `(rho, sharpness)` pairs.
    pub sharpness_values: Vec<(f64, f64)>,
    pub clamped_step_sizes: usize,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::MissingRun(path));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

/// Exclusive hold on a run directory; released on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        std::io::Write::flush(&mut w)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// `output_dir` when set, otherwise `<root>/<command>-<hash prefix>` where
/// the root comes from `QTEMPER_OUTPUT_ROOT` (default `runs`).
pub fn run_dir(cfg: &ExperimentConfig, command: &str) -> PathBuf {
    if !cfg.output_dir.is_empty() {
        return PathBuf::from(&cfg.output_dir);
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(format!("{command}-{}", &cfg.hash()[..12]))
}

/// Full-precision training from a seeded initialization.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let data = load_datasets(cfg)?;
    pretrain_with(cfg, &data)
}

/// Quantization-aware training starting from `fp_checkpoint`.
pub fn run_qat(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let data = load_datasets(cfg)?;
    qat_with(cfg, &data)
}

fn pretrain_with(cfg: &ExperimentConfig, (train_data, test_data): &(Dataset, Dataset)) -> Result<RunOutcome> {
    let dir = run_dir(cfg, "pretrain");
    let _lock = RunLock::acquire(&dir)?;
    let spec = cfg.model_spec(train_data.sample_shape(), train_data.num_classes);
    let mut model = build(&spec, &mut RandomSource::derive(cfg.seed, &[stream::INIT]))?;
    let phase = Phase {
        schedule: cfg.pretrain_schedule(),
        policy: NoisePolicy::disabled(),
        stream: 0,
    };
    log::info!("pretrain: {} parameters, {} epochs -> {}", model.num_params(), cfg.pretrain_epochs, dir.display());
    let log = train(&mut model, train_data, test_data, cfg, &phase)?;
    let sharp = sharpness_sweep(&model, train_data, cfg)?;
    finish(&dir, "pretrain", cfg, &model.to_checkpoint(), log, sharp, false)
}

fn qat_with(cfg: &ExperimentConfig, (train_data, test_data): &(Dataset, Dataset)) -> Result<RunOutcome> {
    if cfg.fp_checkpoint.is_empty() {
        return Err(Error::Config("qat needs `fp_checkpoint`".into()));
    }
    let ck_path = Path::new(&cfg.fp_checkpoint);
    if !ck_path.is_file() {
        return Err(Error::MissingRun(ck_path.to_path_buf()));
    }
    let ck = Checkpoint::load(ck_path)?;
    let dir = run_dir(cfg, "qat");
    let _lock = RunLock::acquire(&dir)?;
    let spec = cfg.model_spec(train_data.sample_shape(), train_data.num_classes);
    let mut model = build(&spec, &mut RandomSource::derive(cfg.seed, &[stream::INIT]))?;
    let policy = cfg.noise_policy();
    load_fp_then_enable_qat(&mut model, &ck, cfg.bits, &policy, cfg.quantize_activations)?;
    let phase = Phase {
        schedule: cfg.qat_schedule(),
        policy,
        stream: 1,
    };
    log::info!("qat: {} bits, c = {}, {} epochs -> {}", cfg.bits, cfg.c, cfg.epochs, dir.display());
    let log = train(&mut model, train_data, test_data, cfg, &phase)?;
    let sharp = sharpness_sweep(&model, train_data, cfg)?;
    finish(&dir, "qat", cfg, &model.to_checkpoint(), log, sharp, true)
}

fn finish(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    mut log: super::train::TrainLog,
    sharp: Vec<(f64, f64)>,
    with_noise: bool,
) -> Result<RunOutcome> {
    if let (Some(last), Some(&(_, s))) = (log.metrics.last_mut(), sharp.first()) {
        last.sharpness = Some(s);
    }
    let last = log.metrics.iter().rev().find(|r| r.split == Split::Test).expect("epoch-0 row always present");
    let text = cfg.to_text();
    write_atomic(&dir.join(CONFIG_FILE), |w| Ok(std::io::Write::write_all(w, text.as_bytes())?))?;
    write_atomic(&dir.join(METRICS_FILE), |w| write_metrics_csv(w, &log.metrics))?;
    if with_noise {
        write_atomic(&dir.join(NOISE_FILE), |w| write_noise_csv(w, &log.noise))?;
    }
    if !sharp.is_empty() {
        write_atomic(&dir.join(SHARPNESS_FILE), |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["rho", "sharpness"])?;
            for (rho, s) in &sharp {
                c.write_record([rho.to_string(), s.to_string()])?;
            }
            c.flush()?;
            Ok(())
        })?;
    }
    write_atomic(&dir.join(CHECKPOINT_FILE), |w| {
        Ok(std::io::Write::write_all(w, &ck.to_bytes())?)
    })?;
    let manifest = RunManifest {
        command: command.into(),
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        config: CONFIG_FILE.into(),
        metrics: METRICS_FILE.into(),
        metric_rows: log.metrics.len(),
        noise: with_noise.then(|| NOISE_FILE.into()),
        sharpness: (!sharp.is_empty()).then(|| SHARPNESS_FILE.into()),
        checkpoint: CHECKPOINT_FILE.into(),
        epochs: last.epoch,
        final_top1: last.top1,
        final_loss: last.loss,
        sharpness_values: sharp,
        clamped_step_sizes: log.clamped_step_sizes,
    };
    write_atomic(&dir.join(MANIFEST_FILE), |w| Ok(serde_json::to_writer_pretty(w, &manifest)?))?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        manifest,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    NoiseScale(Vec<f64>),
    Bits(Vec<u32>),
}

impl SweepAxis {
    fn labels(&self) -> Vec<String> {
        match self {
            SweepAxis::NoiseScale(v) => v.iter().map(|c| format!("c{c}")).collect(),
            SweepAxis::Bits(v) => v.iter().map(|b| format!("bits{b}")).collect(),
        }
    }

    fn apply(&self, i: usize, cfg: &mut ExperimentConfig) {
        match self {
            SweepAxis::NoiseScale(v) => cfg.c = v[i],
            SweepAxis::Bits(v) => cfg.bits = v[i],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            SweepAxis::NoiseScale(_) => "c",
            SweepAxis::Bits(_) => "bits",
        }
    }

    fn value(&self, i: usize) -> String {
        match self {
            SweepAxis::NoiseScale(v) => v[i].to_string(),
            SweepAxis::Bits(v) => v[i].to_string(),
        }
    }
}

/// One QAT run of a sweep. Failed runs keep their error text.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub seed: u64,
    pub value: String,
    pub outcome: std::result::Result<RunOutcome, String>,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub dir: PathBuf,
    pub entries: Vec<SweepEntry>,
}

impl SweepSummary {
    pub fn failures(&self) -> usize {
        self.entries.iter().filter(|e| e.outcome.is_err()).count()
    }
}

/// QAT for every `(seed, axis value)` pair. Each seed is pretrained once
/// (unless `fp_checkpoint` is set) and shared across axis values. A failed
/// run is recorded in `summary.csv` and does not stop the others.
pub fn run_sweep(base: &ExperimentConfig, axis: &SweepAxis, seeds: &[u64], parallel: bool) -> Result<SweepSummary> {
    if seeds.is_empty() || axis.labels().is_empty() {
        return Err(Error::Config("sweep needs at least one seed and one axis value".into()));
    }
    let dir = run_dir(base, "sweep");
    let data = load_datasets(base)?;
    let seed_cfg = |s: u64, sub: &str| {
        let mut c = base.clone();
        c.seed = s;
        c.output_dir = dir.join(format!("seed{s}")).join(sub).to_string_lossy().into_owned();
        c
    };
    let pretrain = |&s: &u64| -> std::result::Result<PathBuf, String> {
        if !base.fp_checkpoint.is_empty() {
            return Ok(PathBuf::from(&base.fp_checkpoint));
        }
        pretrain_with(&seed_cfg(s, "pretrain"), &data)
            .map(|o| o.dir.join(CHECKPOINT_FILE))
            .map_err(|e| format!("pretrain failed: {e}"))
    };
    let fp: Vec<_> = if parallel {
        seeds.par_iter().map(pretrain).collect()
    } else {
        seeds.iter().map(pretrain).collect()
    };

    let labels = axis.labels();
    let jobs: Vec<(usize, usize)> = (0..seeds.len()).flat_map(|s| (0..labels.len()).map(move |v| (s, v))).collect();
    let job = |&(si, vi): &(usize, usize)| {
        let outcome = fp[si].clone().and_then(|ck| {
            let mut cfg = seed_cfg(seeds[si], &labels[vi]);
            axis.apply(vi, &mut cfg);
            cfg.fp_checkpoint = ck.to_string_lossy().into_owned();
            cfg.validate().and_then(|_| qat_with(&cfg, &data)).map_err(|e| e.to_string())
        });
        if let Err(e) = &outcome {
            log::warn!("sweep run seed {} {} failed: {e}", seeds[si], labels[vi]);
        }
        SweepEntry {
            seed: seeds[si],
            value: axis.value(vi),
            outcome,
        }
    };
    let entries: Vec<SweepEntry> = if parallel {
        jobs.par_iter().map(job).collect()
    } else {
        jobs.iter().map(job).collect()
    };

    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("summary.csv"), |w| {
        let mut c = csv::Writer::from_writer(w);
        let mut header = vec![axis.name().to_string(), "seed".into(), "status".into(), "top1".into(), "loss".into()];
        header.extend(base.sharpness_rho.iter().map(|r| format!("sharpness@{r}")));
        header.push("error".into());
        c.write_record(&header)?;
        for e in &entries {
            let mut rec = vec![e.value.clone(), e.seed.to_string()];
            match &e.outcome {
                Ok(o) => {
                    rec.extend(["ok".into(), o.manifest.final_top1.to_string(), o.manifest.final_loss.to_string()]);
                    rec.extend(o.manifest.sharpness_values.iter().map(|(_, s)| s.to_string()));
                    rec.push(String::new());
                }
                Err(msg) => {
                    rec.extend(["failed".into(), String::new(), String::new()]);
                    rec.extend(base.sharpness_rho.iter().map(|_| String::new()));
                    rec.push(msg.clone());
                }
            }
            c.write_record(&rec)?;
        }
        c.flush()?;
        Ok(())
    })?;
    Ok(SweepSummary { dir, entries })
}

/// Plot-ready CSVs from finished runs: `<run>.curve.csv` (noise-to-error
/// ratio over a log grid of errors, at the run's c and k) and
/// `max_weight.csv` (largest |w| over layers per test epoch per run).
pub fn emit_figures(runs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::Config("figures need at least one run directory".into()));
    }
    fs::create_dir_all(out_dir)?;
    let grid = log_grid(1e-4, 1.0, 201);
    let mut written = Vec::new();
    let mut max_rows: Vec<(String, String, f64)> = Vec::new();
    for run in runs {
        let cfg_path = run.join(CONFIG_FILE);
        let metrics_path = run.join(METRICS_FILE);
        for p in [&cfg_path, &metrics_path] {
            if !p.is_file() {
                return Err(Error::MissingRun(p.clone()));
            }
        }
        let cfg = ExperimentConfig::load(&cfg_path)?;
        let label = run
            .file_name()
            .map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned());
        let c = if cfg.tempering { cfg.c } else { 0.0 };
        let curve = out_dir.join(format!("{label}.curve.csv"));
        write_atomic(&curve, |w| write_ratio_curve_csv(w, c, cfg.k, &grid))?;
        written.push(curve);

        let mut rdr = csv::Reader::from_path(&metrics_path)?;
        let header = rdr.headers()?.clone();
        let cols: Vec<usize> = header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.ends_with(".max_abs_w"))
            .map(|(i, _)| i)
            .collect();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.get(1) != Some("test") {
                continue;
            }
            let mut m = 0.0f64;
            for &i in &cols {
                let v: f64 = rec[i].parse().map_err(|_| Error::Parse {
                    offset: rec.position().map_or(0, |p| p.byte() as usize),
                    message: format!("bad max_abs_w value `{}`", &rec[i]),
                })?;
                m = m.max(v);
            }
            max_rows.push((label.clone(), rec[0].to_string(), m));
        }
    }
    let max_path = out_dir.join("max_weight.csv");
    write_atomic(&max_path, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["run", "epoch", "max_abs_w"])?;
        for (run, epoch, m) in &max_rows {
            c.write_record([run.as_str(), epoch.as_str(), &m.to_string()])?;
        }
        c.flush()?;
        Ok(())
    })?;
    written.push(max_path);
    Ok(written)
}

/// Sharpness of a saved checkpoint at every radius in `cfg.sharpness_rho`,
/// on the front of the configured training set.
pub fn run_sharpness(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<(f64, f64)>> {
    if !checkpoint.is_file() {
        return Err(Error::MissingRun(checkpoint.to_path_buf()));
    }
    if cfg.sharpness_rho.is_empty() {
        return Err(Error::Config("sharpness needs `sharpness_rho`".into()));
    }
    let (train_data, _) = load_datasets(cfg)?;
    let spec = cfg.model_spec(train_data.sample_shape(), train_data.num_classes);
    let mut model = build(&spec, &mut RandomSource::derive(cfg.seed, &[stream::INIT]))?;
    model.load_checkpoint(&Checkpoint::load(checkpoint)?)?;
    sharpness_sweep(&model, &train_data, cfg)
}
