use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor is not symmetric (asymmetry {asymmetry:.3e} exceeds {tolerance:.1e})")]
    NonSymmetricInput { asymmetry: f64, tolerance: f64 },

    #[error("matrix is not a proper rotation: {0}")]
    InvalidRotation(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("loss must be a 1x1 node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("atoms {a} and {b} coincide (distance {distance:.3e} A)")]
    DegenerateGeometry { a: usize, b: usize, distance: f64 },

    #[error("value {value} outside of ({lo}, {hi})")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("unsupported element with atomic number {0}")]
    UnknownElement(u32),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid polarizability tensor at line {line}: {message}")]
    InvalidTensor { line: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    DivergenceDetected { epoch: usize, step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by malformed input or configuration rather than
    /// by numerical failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::DivergenceDetected { .. })
    }
}
