use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Configuration problems; carries every violation found, not just the first.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("ensemble must contain at least one particle")]
    EmptyEnsemble,

    #[error("diffusion kernel index {index} out of range (family has {len} kernels)")]
    KernelIndex { index: usize, len: usize },

    #[error("column index {index} out of range for dimension {dim} (columns are 1-based)")]
    ColumnIndex { index: usize, dim: usize },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("non-finite value in {what} at step {step} (t = {time})")]
    BlowUp { step: usize, time: f64, what: String },

    #[error("det(J) <= 0 for tracked point {point} at step {step} (t = {time}); the time step is too large for this model")]
    DeterminantSign { step: usize, time: f64, point: usize },

    #[error("no snapshot at t = {0}; interpolation is refused, request a saved time")]
    MissingSnapshot(f64),

    #[error("point {0} is not a tracked quadrature node")]
    UntrackedPoint(usize),

    #[error("{0}")]
    InvalidModel(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("missing upstream artifact: {0}")]
    StageDependency(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed data in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
