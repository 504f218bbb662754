use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: byte {offset}: {message}")]
    Format {
        context: String,
        offset: usize,
        message: String,
    },
    #[error("{context}: line {line}: {message}")]
    Parse {
        context: String,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] cca_core::Error),
    #[error("{0}")]
    Validation(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for validation failures, 2 for I/O and parse errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. } | Self::Format { .. } | Self::Parse { .. } | Self::Usage(_) => 2,
            Self::Core(_) | Self::Validation(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
