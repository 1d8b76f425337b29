use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GathError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] ndiff::Error),
}

impl GathError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Parse { .. } | Self::Data(_) | Self::Io { .. } | Self::Checkpoint(_) => 3,
            Self::Numeric(_) | Self::Tensor(ndiff::Error::NonFinite(_)) => 4,
            Self::Tensor(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, GathError>;
