use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum LvitError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("checkpoint incompatible with config: {}", .0.join("; "))]
    Compat(Vec<String>),

    #[error("ingest error at {}: {detail}", path.display())]
    Ingest { path: PathBuf, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, LvitError>;

impl LvitError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        LvitError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LvitError::Io { path: path.into(), source }
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        LvitError::Ingest { path: path.into(), detail: detail.into() }
    }
}
