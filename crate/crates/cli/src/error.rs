use std::path::PathBuf;

use saecount::SaeError;
use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{0} did not converge; results were written")]
    NotConverged(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Sae(#[from] SaeError),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_VALIDATION,
            CliError::NotConverged(_) => EXIT_NONCONVERGENCE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Json(e) if e.is_io() => EXIT_IO,
            CliError::Json(_) => EXIT_VALIDATION,
            CliError::Sae(e) => match e {
                SaeError::Io { .. } => EXIT_IO,
                SaeError::Csv(c) if c.is_io_error() => EXIT_IO,
                SaeError::Optimizer(_)
                | SaeError::Singular(_)
                | SaeError::TooManyFailures { .. }
                | SaeError::NonFinite(_) => EXIT_NONCONVERGENCE,
                _ => EXIT_VALIDATION,
            },
        }
    }
}
