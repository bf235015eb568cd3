use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Everything a subcommand can fail with, mapped onto the exit-code contract.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] maxmatch_core::Error),
    #[error("{0}")]
    Config(String),
    #[error("invalid JSON in {path}: {source}")]
    BadJson {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0} self-check(s) failed")]
    ChecksFailed(usize),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECKS: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_IO: u8 = 4;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Core(e) if e.is_io() => EXIT_IO,
            CliError::Core(_) | CliError::Config(_) | CliError::BadJson { .. } => EXIT_CONFIG,
            CliError::Io { .. } | CliError::Csv(_) => EXIT_IO,
            CliError::ChecksFailed(_) => EXIT_CHECKS,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
