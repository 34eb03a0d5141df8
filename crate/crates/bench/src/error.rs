use std::path::{Path, PathBuf};

use clr_core::ClrError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] ClrError),
    #[error("{0}")]
    Invalid(String),
}

impl BenchError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        BenchError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, message: impl ToString) -> Self {
        BenchError::Parse {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    /// Process exit code: 2 for filesystem failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Io { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
