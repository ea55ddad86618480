use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid window: length {len} is shorter than kernel width {width}")]
    InvalidWindow { len: usize, width: usize },

    #[error("empty axis in {op}")]
    EmptyAxis { op: &'static str },

    #[error("label {label} at position {index} is outside [0, {num_classes})")]
    Label { index: usize, label: usize, num_classes: usize },

    #[error("backward called on an empty tape or a node that was never recorded")]
    EmptyTape,

    #[error("batch of size {n} is too small for {op} (need at least 2)")]
    BatchTooSmall { op: &'static str, n: usize },

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("inconsistent data: {0}")]
    Inconsistent(String),

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("load error in `{field}`: {reason}")]
    Load { field: String, reason: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn load(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load { field: field.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format { offset, reason: reason.into() }
    }
}
