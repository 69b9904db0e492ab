use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate scale: predicted translations are all zero")]
    DegenerateScale,
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid task weights: {0}")]
    InvalidWeights(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            Error::Io { .. } => 1,
            _ => 2,
        }
    }
}
