use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("{path}: length {len} bytes is not a multiple of {record} bytes")]
    MalformedLength {
        path: PathBuf,
        len: u64,
        record: usize,
    },

    #[error("{path}: non-finite value in point {index}")]
    NonFiniteValue { path: PathBuf, index: usize },

    #[error("{path}: unknown class id {id} at index {index}")]
    UnknownClassId { path: PathBuf, id: u32, index: usize },

    #[error("point at the sensor origin has no direction")]
    ZeroRange,

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("value {value} outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("need at least {needed} sequences, got {got}")]
    InsufficientSequences { needed: usize, got: usize },

    #[error("need more than {k} points, got {n}")]
    TooFewPoints { k: usize, n: usize },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("dataset has no {0} frames")]
    DatasetEmpty(&'static str),

    #[error("loss diverged (non-finite) at epoch {epoch}, step {step}")]
    DivergenceDetected { epoch: usize, step: usize },

    #[error("frames are misaligned: {0}")]
    MisalignedFrames(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// Coarse category used by the command-line front end to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFiniteGradient(_) | Error::DivergenceDetected { .. } => ErrorKind::Numeric,
            Error::InvalidParams(_) | Error::OutOfRange { .. } | Error::ConfigMismatch(_) => {
                ErrorKind::Config
            }
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Data,
    Config,
    Numeric,
}
