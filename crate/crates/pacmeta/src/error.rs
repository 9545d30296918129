//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// A matrix could not be factorized even after the jitter ladder was
    /// exhausted (see `autodiff::matrix` for the escalation policy).
    #[error("Cholesky factorization failed for {size}x{size} matrix (last jitter {last_jitter:e})")]
    CholeskyFailure { size: usize, last_jitter: f64 },

    /// A forward evaluation produced NaN or infinity where a finite scalar
    /// was required.
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    /// Mismatched dimensions between two quantities that must agree.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Invalid configuration value, with the offending field named.
    #[error("invalid config: {0}")]
    Config(String),

    /// Training diverged (non-finite objective); the partial trace is
    /// preserved by the caller.
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    /// A grid result table was missing rows required by cross-validation.
    #[error("incomplete grid: {0}")]
    IncompleteGrid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
