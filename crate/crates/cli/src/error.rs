use std::path::PathBuf;

use slom::attack::AttackError;
use slom::network::{NetworkError, SpecError};
use slom::structural::StructuralError;
use slom::training::{DataError, OracleError};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Spec {
        path: PathBuf,
        #[source]
        source: SpecError,
    },
    #[error("invalid config file {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Structural(#[from] StructuralError),
    #[error("attack diverged at iteration {0}; partial trace written")]
    Diverged(usize),
    #[error(transparent)]
    Attack(AttackError),
    #[error("failed to encode output: {0}")]
    Encode(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 3 for numerical failures, 2 for everything the user can fix by
    /// changing arguments, files or config.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged(_) => EXIT_NUMERIC,
            CliError::Attack(AttackError::Diverged { .. }) => EXIT_NUMERIC,
            CliError::Attack(AttackError::Tensor(_))
            | CliError::Network(NetworkError::Tensor(_)) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Diverged { iteration, .. } => CliError::Diverged(iteration),
            other => CliError::Attack(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
