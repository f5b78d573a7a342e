use std::path::{Path, PathBuf};

use thiserror::Error;

/// Exit codes: 1 usage, 2 data or validation, 3 numerical failure.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] partdisc_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn data(path: &Path, detail: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {detail}", path.display()))
    }
}

pub type CliResult<T> = Result<T, CliError>;
