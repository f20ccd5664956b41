use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("negative variance in {0}")]
    NegativeVariance(&'static str),

    #[error("variance {value:e} below floor {floor:e} in {op}")]
    BelowFloor {
        op: &'static str,
        value: f64,
        floor: f64,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("{what}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        what: String,
        found: u32,
        expected: u32,
    },

    #[error("{0}: truncated file")]
    Truncated(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

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
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
