use thiserror::Error;

/// Errors raised by model construction, score evaluation and the solvers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid penalty: {0}")]
    InvalidPenalty(String),

    #[error("invalid model specification: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("observed-data likelihood underflows for observation {index}")]
    DegenerateLikelihood { index: usize },

    #[error("integral-equation kernel is singular (condition estimate {condition:.3e})")]
    SingularKernel { condition: f64 },

    #[error("Newton iteration did not converge after {iterations} iterations (last step {last_step:.3e})")]
    NonConvergence { iterations: usize, last_step: f64 },

    #[error("sandwich bread matrix is singular")]
    SingularBread,

    #[error("kernel-smoothed Omega(z) is singular at z = {z}")]
    SingularOmega { z: f64 },

    #[error("information matrix plus penalty is singular")]
    SingularInfo,

    #[error("no observation has positive kernel weight at z = {z}")]
    EmptyWindow { z: f64 },

    #[error("effective degrees of freedom {df} reach the sample size {n}")]
    DfSaturated { df: f64, n: usize },

    #[error("every fit on the lambda grid failed")]
    AllFitsFailed,

    #[error("full-model approximate model error is zero")]
    DivideByZero,

    #[error("{failed} of {total} replications failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("i/o: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
