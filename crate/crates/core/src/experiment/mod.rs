//! Configured runs: pretraining, quantization-aware training, sweeps and
//! figure data, each writing into its own locked run directory.

mod config;
mod run;
mod train;

pub use config::{DatasetKind, ExperimentConfig};
pub use run::{
    emit_figures, run_dir, run_pretrain, run_qat, run_sharpness, run_sweep, write_atomic, RunManifest, RunOutcome,
    SweepAxis, SweepEntry, SweepSummary, CHECKPOINT_FILE, CONFIG_FILE, MANIFEST_FILE, METRICS_FILE, NOISE_FILE,
    OUTPUT_ROOT_ENV, SHARPNESS_FILE,
};
pub use train::{load_datasets, sharpness_sweep, train, write_noise_csv, NoiseRow, Phase, TrainLog};

#[cfg(test)]
mod tests;
