use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite at row {row}")]
    NonFinite { row: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid shard {path}: {reason}")]
    InvalidShard { path: PathBuf, reason: String },

    #[error("shard not found: {0}")]
    ShardNotFound(PathBuf),

    #[error("label count mismatch: expected {expected}, got {actual}")]
    LabelMismatch { expected: usize, actual: usize },

    #[error("invalid manifest {path}: {reason}")]
    InvalidManifest { path: PathBuf, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty batch")]
    EmptyBatch,

    #[error("column {column} of the dictionary is not unit norm (norm {norm})")]
    NotUnitNorm { column: usize, norm: f64 },

    #[error("decoder column {0} has zero norm")]
    ZeroNormColumn(usize),

    #[error("invalid prefix set: {0}")]
    InvalidPrefixes(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("degenerate evaluation set")]
    DegenerateEvaluation,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
