use thiserror::Error;

/// Errors raised by the solvers and the problem instances.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SqpError {
    #[error("invalid norm exponent {0} (must be >= 1 or infinity)")]
    InvalidExponent(f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("grid functions live on different measure spaces")]
    SpaceMismatch,

    #[error("invalid bounds: {0}")]
    InvalidBounds(String),

    #[error("invalid measure space: {0}")]
    InvalidSpace(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("inadmissible point: {0}")]
    Domain(String),

    #[error("state solve failed{}: residual {residual:.3e} after {iterations} Newton iterations", step_suffix(*.step))]
    StateSolve {
        step: Option<usize>,
        iterations: usize,
        residual: f64,
    },

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("QP solver did not converge in {iterations} iterations (fixed-point residual {residual:.3e})")]
    QpNonConvergence { iterations: usize, residual: f64 },

    #[error("reduced QP operator is not positive definite (curvature {curvature:.3e})")]
    Indefinite { curvature: f64 },

    #[error("rate estimation: {0}")]
    RateEstimate(String),

    #[error("instance too large: {n} points exceeds the limit of {max}")]
    TooLarge { n: usize, max: usize },

    #[error("no feasible stationary active-set pattern found")]
    Infeasible,

    #[error("setup error: {0}")]
    Setup(String),
}

fn step_suffix(step: Option<usize>) -> String {
    match step {
        Some(k) => format!(" at time step {k}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, SqpError>;
