use std::fs;
use std::path::Path;

use super::*;
use crate::error::Error;
use crate::models::{build, Checkpoint};
use crate::rng::{stream, RandomSource};

fn gaussian(dir: &Path, margin: f64) -> ExperimentConfig {
    let mut c = ExperimentConfig::parse(&format!(
        "dataset = synthetic-gaussian\narchitecture = mlp\nhidden = 16\nclasses = 4\ninput_dim = 8\n\
         margin = {margin}\ntrain_size = 400\ntest_size = 200\nbatch_size = 32\nepochs = 2\npretrain_epochs = 5\n\
         schedule = cosine\n"
    ))
    .unwrap();
    c.output_dir = dir.to_string_lossy().into_owned();
    c
}

fn pretrained(root: &Path) -> (ExperimentConfig, RunOutcome) {
    let cfg = gaussian(&root.join("fp"), 6.0);
    let out = run_pretrain(&cfg).unwrap();
    (cfg, out)
}

#[test]
fn separable_task_is_learned() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, out) = pretrained(tmp.path());
    assert!(out.manifest.final_top1 > 0.99, "{}", out.manifest.final_top1);
    assert_eq!(out.manifest.epochs, 5);
    assert_eq!(out.manifest.metric_rows, 11);
    for f in [CONFIG_FILE, METRICS_FILE, CHECKPOINT_FILE, MANIFEST_FILE] {
        assert!(out.dir.join(f).is_file(), "{f}");
    }
    assert!(!out.dir.join(".lock").exists());
    assert_eq!(RunManifest::load(&out.dir).unwrap(), out.manifest);
}

#[test]
fn zero_margin_stays_at_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_pretrain(&gaussian(tmp.path(), 0.0)).unwrap();
    assert!((out.manifest.final_top1 - 0.25).abs() < 0.05, "{}", out.manifest.final_top1);
}

#[test]
fn rerun_reproduces_metrics_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_pretrain(&gaussian(&tmp.path().join("a"), 3.0)).unwrap();
    let b = run_pretrain(&gaussian(&tmp.path().join("b"), 3.0)).unwrap();
    for f in [METRICS_FILE, CHECKPOINT_FILE] {
        assert_eq!(fs::read(a.dir.join(f)).unwrap(), fs::read(b.dir.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_epochs_keeps_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = gaussian(tmp.path(), 3.0);
    cfg.pretrain_epochs = 0;
    let out = run_pretrain(&cfg).unwrap();
    let (train, _) = load_datasets(&cfg).unwrap();
    let spec = cfg.model_spec(train.sample_shape(), train.num_classes);
    let init = build(&spec, &mut RandomSource::derive(cfg.seed, &[stream::INIT])).unwrap();
    let saved = Checkpoint::load(&out.dir.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(saved.to_bytes(), init.to_checkpoint().to_bytes());
    assert_eq!(out.manifest.metric_rows, 1);
}

#[test]
fn locked_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join(".lock"), "").unwrap();
    let err = run_pretrain(&gaussian(tmp.path(), 3.0)).unwrap_err();
    assert!(matches!(err, Error::Locked(_)), "{err}");
}

#[test]
fn qat_needs_an_existing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = gaussian(tmp.path(), 3.0);
    assert!(matches!(run_qat(&cfg).unwrap_err(), Error::Config(_)));
    cfg.fp_checkpoint = tmp.path().join("nope.qtck").to_string_lossy().into_owned();
    assert!(matches!(run_qat(&cfg).unwrap_err(), Error::MissingRun(_)));
}

#[test]
fn zero_noise_matches_disabled_tempering() {
    let tmp = tempfile::tempdir().unwrap();
    let (base, fp) = pretrained(tmp.path());
    let run = |name: &str, c: f64, tempering: bool| {
        let mut cfg = base.clone();
        cfg.bits = 2;
        cfg.c = c;
        cfg.tempering = tempering;
        cfg.fp_checkpoint = fp.dir.join(CHECKPOINT_FILE).to_string_lossy().into_owned();
        cfg.output_dir = tmp.path().join(name).to_string_lossy().into_owned();
        run_qat(&cfg).unwrap()
    };
    let zero = run("zero", 0.0, true);
    let off = run("off", 0.0, false);
    let noisy = run("noisy", 0.4, true);
    let bytes = |o: &RunOutcome, f| fs::read(o.dir.join(f)).unwrap();
    assert_eq!(bytes(&zero, CHECKPOINT_FILE), bytes(&off, CHECKPOINT_FILE));
    assert_ne!(bytes(&zero, CHECKPOINT_FILE), bytes(&noisy, CHECKPOINT_FILE));
    let noise = String::from_utf8(bytes(&noisy, NOISE_FILE)).unwrap();
    assert!(noise.starts_with("epoch,lr,policy_scale,mean_abs_qerr,mean_noise_std\n"));
    assert_eq!(noise.lines().count(), 1 + 3);
}

#[test]
fn sweep_records_failures_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = gaussian(&tmp.path().join("sweep"), 6.0);
    cfg.pretrain_epochs = 2;
    cfg.epochs = 1;
    cfg.sharpness_rho = vec![1e-2];
    cfg.sharpness_batches = 2;
    cfg.sharpness_batch_size = 32;
    let s = run_sweep(&cfg, &SweepAxis::Bits(vec![1, 2]), &[0, 1], true).unwrap();
    assert_eq!(s.entries.len(), 4);
    assert_eq!(s.failures(), 2);
    let summary = fs::read_to_string(s.dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("bits,seed,status,top1,loss,sharpness@0.01,error\n"), "{summary}");
    assert_eq!(summary.matches(",failed,").count(), 2);
    let ok = s.entries.iter().find(|e| e.outcome.is_ok()).unwrap();
    let m = &ok.outcome.as_ref().unwrap().manifest;
    assert_eq!(m.sharpness_values.len(), 1);
    assert!(m.sharpness_values[0].1 >= 0.0);
}

#[test]
fn figures_from_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (mut cfg, fp) = pretrained(tmp.path());
    assert!(matches!(
        emit_figures(&[tmp.path().join("missing")], &tmp.path().join("fig")).unwrap_err(),
        Error::MissingRun(_)
    ));
    cfg.c = 0.0;
    cfg.fp_checkpoint = fp.dir.join(CHECKPOINT_FILE).to_string_lossy().into_owned();
    cfg.output_dir = tmp.path().join("base").to_string_lossy().into_owned();
    let base = run_qat(&cfg).unwrap();
    let files = emit_figures(&[base.dir.clone()], &tmp.path().join("fig")).unwrap();
    let curve = fs::read_to_string(&files[0]).unwrap();
    let ratios: Vec<f64> = curve.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(ratios.len(), 201);
    assert!(ratios.iter().all(|&r| r == 1.0));
    let max_w = fs::read_to_string(&files[1]).unwrap();
    assert_eq!(max_w.lines().count(), 1 + 3);
    assert!(max_w.lines().nth(1).unwrap().starts_with("base,0,"));
}

#[test]
fn sharpness_of_saved_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let (mut cfg, fp) = pretrained(tmp.path());
    cfg.sharpness_rho = vec![0.0, 1e-2];
    cfg.sharpness_batches = 1;
    cfg.sharpness_batch_size = 64;
    let s = run_sharpness(&cfg, &fp.dir.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(s[0], (0.0, 0.0));
    assert!(s[1].1 >= 0.0);
}

#[test]
fn run_dir_uses_hash_under_root() {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir.clear();
    let d = run_dir(&cfg, "qat");
    let name = d.file_name().unwrap().to_string_lossy().into_owned();
    assert_eq!(name, format!("qat-{}", &cfg.hash()[..12]));
}
