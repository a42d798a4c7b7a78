use std::path::PathBuf;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dim {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("non-finite value in {what} at {index}")]
    NonFinite { what: String, index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
