//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(String),
    #[error("vertex {vertex} has a zero-area face star")]
    ZeroAreaStar { vertex: usize },
    #[error("mesh is not watertight: ray parity disagrees at point {point:?}")]
    NonWatertight { point: [f64; 3] },
    #[error("invalid diffusion schedule: {0}")]
    InvalidSchedule(String),
    #[error("schedule singularity at t={t}: {reason}")]
    ScheduleSingularity { t: usize, reason: &'static str },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite value in batch at step {step}, record {record}")]
    NonFiniteLoss { step: usize, record: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model is object-conditional but no object cloud was supplied")]
    MissingObject,
    #[error("point cloud has {got} points, need at least {need}")]
    TooFewPoints { got: usize, need: usize },
    #[error("synthetic generation stalled after {0} consecutive rejections")]
    RejectionStall(usize),
    #[error("checksum mismatch for {path}: manifest {expected}, file {actual}")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("unit mismatch: expected \"m\", found {0:?}")]
    UnitMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0}")]
    Usage(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Stable machine-readable class name, printed by the CLI.
    pub fn class(&self) -> &'static str {
        match self {
            Error::DegenerateRotation(_) => "DegenerateRotation",
            Error::ZeroAreaStar { .. } => "ZeroAreaStar",
            Error::NonWatertight { .. } => "NonWatertight",
            Error::InvalidSchedule(_) => "InvalidSchedule",
            Error::ScheduleSingularity { .. } => "ScheduleSingularity",
            Error::EmptyDataset => "EmptyDataset",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::MissingObject => "MissingObject",
            Error::TooFewPoints { .. } => "TooFewPoints",
            Error::RejectionStall(_) => "RejectionStall",
            Error::ChecksumMismatch { .. } => "ChecksumMismatch",
            Error::LayoutMismatch(_) => "LayoutMismatch",
            Error::UnitMismatch(_) => "UnitMismatch",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Usage(_) => "Usage",
            Error::Io { .. } => "IO",
            Error::Json { .. } => "IO",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
