use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("constant volume: standard deviation is zero")]
    ConstantVolume,

    #[error("spatial dims {height}x{width} not divisible by {divisor}")]
    Indivisible {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("parse error at column {column}: {msg}")]
    Parse { column: usize, msg: String },

    #[error("pipeline step {index} ({step}): {source}")]
    Step {
        index: usize,
        step: String,
        #[source]
        source: Box<Error>,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Process exit code for the command line: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParam(_) | Error::Parse { .. } => 1,
            Error::NonFinite(_) | Error::ConstantVolume => 3,
            Error::Step { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
