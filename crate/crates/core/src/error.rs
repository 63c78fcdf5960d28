use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by ingestion, fitting and resampling routines.
#[derive(Debug, Error)]
pub enum SaeError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at data row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("design matrix is rank deficient; collinear column(s): {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("singular covariance: {0}")]
    Singular(String),

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("bootstrap aborted: {failures} of {replicates} replicates failed")]
    TooManyFailures { failures: usize, replicates: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SaeError>;
