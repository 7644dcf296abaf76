//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("time {t} outside [0, {t_max}]")]
    TimeOutOfRange { t: f64, t_max: f64 },

    #[error("invalid problem definition: {0}")]
    InvalidProblem(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown builtin problem `{0}`")]
    UnknownProblem(String),

    #[error("assumption validation failed: {violations} violation(s), first: {first}")]
    ValidationFailed { violations: usize, first: String },

    #[error("regression error: {0}")]
    Regression(String),

    #[error(
        "implicit step did not converge (residual {residual:.3e} after {iterations} iterations)"
    )]
    NonConvergence { residual: f64, iterations: usize },

    #[error("implicit step contraction bound violated: L_y*dt = {product} >= 1")]
    ContractionBound { product: f64 },

    #[error("non-finite state at step {step}, path {path}: x = {state}")]
    NonFinite { step: usize, path: usize, state: f64 },

    #[error("branch {0} has not been solved")]
    MissingBranch(usize),

    #[error("path layout mismatch: {0}")]
    PathMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
