use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("{solver} did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    SolverFailure {
        solver: &'static str,
        residual: f64,
        iterations: usize,
    },

    #[error(
        "positivity clamp removed {clamped:.3e} relative mass from {field} (budget {budget:.1e}); reduce dt"
    )]
    Stability {
        field: &'static str,
        clamped: f64,
        budget: f64,
    },

    #[error("grid too large for dense oracle: {cells} cells (limit {limit})")]
    GridTooLarge { cells: usize, limit: usize },

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("config validation failed: {0}")]
    Validation(String),

    #[error("snapshot format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
