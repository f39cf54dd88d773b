use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("gradient tape already consumed; call reset() before another backward pass")]
    TapeConsumed,

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("checkpoint mismatch for `{name}`: {message}")]
    Checkpoint { name: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },

    #[error("run directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("missing run output: {0}")]
    MissingRun(PathBuf),

    #[error("all {0} sharpness restarts diverged")]
    AscentFailed(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Param(_) => "param",
            Error::TapeConsumed => "tape_consumed",
            Error::NonScalarRoot(_) => "non_scalar_root",
            Error::Label { .. } => "label",
            Error::Parse { .. } => "parse",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Config(_) => "config",
            Error::NonFinite { .. } => "non_finite",
            Error::Locked(_) => "locked",
            Error::MissingRun(_) => "missing_run",
            Error::AscentFailed(_) => "ascent_failed",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
