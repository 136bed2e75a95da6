use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{file}:{line}:{column}: {message}")]
    Parse {
        file: PathBuf,
        line: u64,
        column: usize,
        message: String,
    },
    #[error("schema: {0}")]
    Schema(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Model(#[from] occnet::Error),
}

impl CliError {
    /// 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Parse { .. } | CliError::Schema(_) | CliError::Io { .. } => 2,
            CliError::Numeric(_) => 3,
            CliError::Model(e) => match e {
                occnet::Error::InvalidArgument(_) => 2,
                _ => 3,
            },
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(file: &Path, line: u64, column: usize, message: impl Into<String>) -> Self {
        CliError::Parse {
            file: file.to_path_buf(),
            line,
            column,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
