use thiserror::Error;

/// Errors raised by the numerical kernels and analyses.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not Hurwitz-stable: eigenvalue with real part {min_real_part:.3e} <= 0")]
    NotStable { min_real_part: f64 },

    #[error("degenerate linear system: {0}")]
    Degenerate(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("operator is reducible: {0}")]
    Reducible(String),

    #[error("path {path} diverged at step {step}")]
    Divergence { path: usize, step: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
