use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}: {message}")]
    InconsistentDataset { line: usize, message: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid observation `{id}`: {violations}")]
    InvalidObservation { id: String, violations: String },

    #[error("removal of {removed} of {total} samples would empty the observation")]
    WouldEmptyObservation { removed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("unknown point (variate {variate}, sample {sample})")]
    UnknownPoint { variate: usize, sample: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dataset does not match model: {0}")]
    DatasetMismatch(String),

    #[error("not a checkpoint")]
    NotACheckpoint,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload")]
    TruncatedPayload,

    #[error("manifest/payload inconsistency: {0}")]
    Manifest(String),

    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
