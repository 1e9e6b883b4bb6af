use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix of dimension {dim} is not positive definite (jitter reached {jitter:e})")]
    NotPd { dim: usize, jitter: f64 },
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix of shape {shape:?} is not square")]
    NotSquare { shape: (usize, usize) },
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    DimMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("layer {layer}: no proposal accepted after {proposals} attempts")]
    ProposalBudgetExceeded { layer: usize, proposals: u64 },
    #[error("empty sample")]
    EmptyInput,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
