use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or matrix does not have the extent implied by the declared shape.
    #[error("dimension mismatch in `{tensor}` along axis {axis}: expected {expected}, found {found}")]
    Dimension {
        tensor: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("policy enumeration refused: more than {cap} candidate policies (enumeration cap)")]
    EnumerationCap { cap: u64 },

    #[error("ill-posed maximization at step {step}: R^a + B^T P B has eigenvalue {eigenvalue:e} (must be negative)")]
    IllPosed { step: usize, eigenvalue: f64 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
