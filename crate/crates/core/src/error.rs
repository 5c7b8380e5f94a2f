use thiserror::Error;

/// Errors raised by grid construction, solvers and the control pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid conductivity: {0}")]
    InvalidConductivity(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("Newton iteration diverged at time step {step} (residual {residual:e})")]
    NewtonDiverged { step: usize, residual: f64 },

    #[error("linear solve failed at time step {step}: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("search for lambda exhausted at {last:e}")]
    LambdaSearchExhausted { last: f64 },

    #[error("power iteration did not converge after {iterations} iterations (last Rayleigh quotient {rayleigh:e})")]
    PowerIterationNotConverged { iterations: usize, rayleigh: f64 },

    #[error("fixed-point iteration did not converge after {iterations} outer iterations (last distance {distance:e})")]
    FixedPointNotConverged { iterations: usize, distance: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Error {
        match self {
            e @ Error::NewtonDiverged { .. } | e @ Error::StepFailed { .. } => e,
            other => Error::StepFailed {
                step,
                source: Box::new(other),
            },
        }
    }

    /// True for errors that signal an iterative method ran out of budget.
    pub fn is_non_convergence(&self) -> bool {
        match self {
            Error::CgNotConverged { .. }
            | Error::NewtonDiverged { .. }
            | Error::PowerIterationNotConverged { .. }
            | Error::FixedPointNotConverged { .. }
            | Error::LambdaSearchExhausted { .. } => true,
            Error::StepFailed { source, .. } => source.is_non_convergence(),
            _ => false,
        }
    }
}
