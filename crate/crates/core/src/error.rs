//! Crate-wide error type and process exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid design space: {0}")]
    InvalidSpace(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("experiment config error: {0}")]
    ExperimentConfig(String),

    #[error("oracle budget exhausted after {budget} evaluations")]
    BudgetExhausted { budget: u64 },

    #[error("configuration not present in label table: {0}")]
    UnknownConfig(String),

    #[error("duplicate configuration in label table (lines {first} and {second})")]
    DuplicateKey { first: usize, second: usize },

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("kernel matrix factorization failed (noise escalated to {noise})")]
    FactorizationFailed { noise: f64 },

    #[error("stale tape: parameters changed since the forward pass")]
    StaleTape,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI. Config problems, oracle problems and
    /// training divergence get distinct codes; everything else maps to 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidSpace(_)
            | Error::InvalidConfig(_)
            | Error::Parse { .. }
            | Error::ExperimentConfig(_) => 2,
            Error::BudgetExhausted { .. }
            | Error::UnknownConfig(_)
            | Error::DuplicateKey { .. }
            | Error::Oracle(_) => 3,
            Error::NonFinite { .. } => 4,
            _ => 1,
        }
    }
}
