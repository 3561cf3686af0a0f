//! Crate-wide error type. Numerical failures carry the stage and bin that
//! produced them so pipeline diagnostics can name the offending location.

/// Errors produced by any stage of the enhancement stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not Hermitian (max asymmetry {asymmetry:e})")]
    NotHermitian { asymmetry: f64 },

    #[error("singular matrix: {context}")]
    SingularMatrix { context: String },

    #[error("degenerate matrix: {context}")]
    DegenerateMatrix { context: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("numerical failure in {stage} at (f={freq}, t={frame}): {detail}")]
    NumericalFailure {
        stage: &'static str,
        freq: usize,
        frame: usize,
        detail: String,
    },

    #[error("estimation failure: {0}")]
    EstimationFailure(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<V> = std::result::Result<V, Error>;

impl Error {
    pub(crate) fn dim_mismatch(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
