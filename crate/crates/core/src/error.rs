use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid label {0}; labels must be -1 or +1")]
    InvalidLabel(f64),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("w is degenerate under the batch statistics (||w||_sigma = {sigma_norm:e})")]
    DegenerateDirection { sigma_norm: f64 },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("uniform-margin system is infeasible (residual {residual:e})")]
    Infeasible { residual: f64 },

    #[error("data is not linearly separable (||w|| reached {norm:e})")]
    NotSeparable { norm: f64 },

    #[error("sweep cap of {sweeps} reached with KKT violation {violation:e}")]
    SolverStalled { sweeps: usize, violation: f64 },

    #[error("sequence is not sorted: {0}")]
    NotSorted(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
