use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("svd did not converge after {sweeps} sweeps (off-diagonal {off_diag:e})")]
    SvdNoConvergence { sweeps: usize, off_diag: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("column {column} of {which} has zero norm")]
    ZeroColumn { which: &'static str, column: usize },

    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sparsity is undefined for an all-zero vector")]
    ZeroVector,

    #[error("training diverged at step {step}: non-finite values in {block}")]
    Diverged { step: usize, block: String },

    #[error("run has no checkpoint at step {0}")]
    MissingCheckpoint(usize),

    #[error("ill-conditioned Gram matrix (condition number {0:e})")]
    IllConditioned(f64),

    #[error("optimization diverged: {0}")]
    OptimizationDiverged(String),

    #[error("dump manifest: {0}")]
    Manifest(String),

    #[error("dump array `{name}` is truncated: need {needed} bytes, file has {available}")]
    TruncatedArray {
        name: String,
        needed: u64,
        available: u64,
    },

    #[error("dump is missing required array `{0}`")]
    MissingArray(String),

    #[error("dump manifest lacks `scale_folded: true`")]
    ScaleNotFolded,

    #[error("checkpoint file {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownName {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
