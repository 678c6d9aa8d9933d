use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("tape: {0}")]
    Tape(String),

    #[error("ctc: label sequence of length {labels} needs at least {required} frames, got {frames}")]
    CtcLength {
        labels: usize,
        required: usize,
        frames: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("adapter chain: {0}")]
    AdapterChain(String),

    #[error("cov is undefined when fine-tuning and separate-model averages coincide ({0})")]
    UndefinedCov(f64),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("integrity: {0}")]
    Integrity(String),

    #[error("freeze contract broken: {0}")]
    FreezeViolation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad data or broken files, as opposed to bad usage.
    pub fn is_integrity(&self) -> bool {
        matches!(
            self,
            Error::Integrity(_) | Error::Io { .. } | Error::Json(_) | Error::Protocol(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
