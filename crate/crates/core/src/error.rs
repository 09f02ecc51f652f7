use thiserror::Error;

/// Errors produced by the solver toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DsmError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("Gram matrix is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),

    #[error("singular operator in {scheme}")]
    SingularOperator { scheme: String },

    #[error("operator is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("unsupported problem: {0}")]
    UnsupportedProblem(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid integrator configuration: {0}")]
    InvalidIntegrator(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("reference oracle failed: {0}")]
    Oracle(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl DsmError {
    /// Re-labels a `SingularOperator` error with the scheme that requested the solve.
    pub fn in_scheme(self, scheme: &str) -> Self {
        match self {
            DsmError::SingularOperator { .. } => DsmError::SingularOperator {
                scheme: scheme.to_string(),
            },
            other => other,
        }
    }
}

impl From<std::io::Error> for DsmError {
    fn from(e: std::io::Error) -> Self {
        DsmError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DsmError>;
