use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("objective diverged at sweep {sweep} (value {value})")]
    Divergence { sweep: usize, value: f64 },

    #[error("restricted normal equations are singular: {0}")]
    Singular(String),

    #[error("enumeration refused: {count} support configurations exceed the limit ({reason})")]
    LimitExceeded { count: u128, reason: String },

    #[error("fold too small: task '{task}' has {n} observations for {folds} folds")]
    FoldTooSmall { task: String, n: usize, folds: usize },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Fmt(#[from] std::fmt::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, msg: msg.into() }
    }
}
