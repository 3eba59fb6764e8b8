use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed header in {path}: {msg}")]
    Header { path: PathBuf, msg: String },

    #[error("payload size mismatch in {path}: expected {expected} values, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed csv {path}: {msg}")]
    Csv { path: PathBuf, msg: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("mask is empty")]
    EmptyMask,

    #[error("trace has {got} samples, need at least {need}")]
    TraceTooShort { got: usize, need: usize },

    #[error("landmark id mismatch: {0}")]
    IdMismatch(String),

    #[error("point {0:?} lies outside the volume extent")]
    OutOfExtent([f64; 3]),

    #[error("non-finite loss at epoch {epoch}, item {item}")]
    NonFiniteLoss { epoch: usize, item: usize },

    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numbers themselves rather than inputs or IO.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::NonFiniteLoss { .. })
    }

    /// True for filesystem and on-disk corruption failures.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Header { .. }
                | Error::SizeMismatch { .. }
                | Error::Csv { .. }
                | Error::CorruptCheckpoint(_)
                | Error::Checksum(_)
        )
    }
}
