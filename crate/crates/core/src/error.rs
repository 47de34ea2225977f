use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {path} at byte offset {offset}: {msg}")]
    Parse { path: PathBuf, offset: u64, msg: String },

    #[error("truncated file {path}: needed {needed} more bytes at offset {offset}")]
    Truncated { path: PathBuf, offset: u64, needed: u64 },

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("unsupported activation {activation} in layer {layer}: {why}")]
    UnsupportedActivation { layer: usize, activation: &'static str, why: &'static str },

    #[error("training diverged at iteration {iter}: loss={loss}, reg={reg}")]
    Diverged { iter: usize, loss: f64, reg: f64 },

    #[error("degenerate basis: {0}")]
    Basis(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
