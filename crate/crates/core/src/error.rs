use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a documented invariant or file schema.
    #[error("validation error: {0}")]
    Validation(String),

    /// A model or algorithm parameter is out of its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Rank-deficient design in a least-squares problem.
    #[error("rank deficient design: {0}")]
    Rank(String),

    /// A matrix that must be positive definite could not be factorized,
    /// even after one round of diagonal jitter.
    #[error("matrix not positive definite ({context}); consider adding jitter or removing near-duplicate sites")]
    NotPositiveDefinite { context: String },

    /// Numerical failure inside a running chain.
    #[error("numerical failure at iteration {iteration}: {source}")]
    Chain {
        iteration: usize,
        #[source]
        source: Box<Error>,
        checkpoint: Option<PathBuf>,
    },

    #[error("{path}: {message}")]
    Load { path: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn not_pd(context: impl Into<String>) -> Self {
        Error::NotPositiveDefinite {
            context: context.into(),
        }
    }

    /// True for failures of the numerical machinery rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::Chain { .. } | Error::Rank(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
