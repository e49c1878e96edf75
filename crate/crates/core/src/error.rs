use thiserror::Error;

/// Errors raised by the identification routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error(
        "factorization failed after jitter escalation (lambda={lambda:e}, beta={beta}, min tau={min_tau:e})"
    )]
    Conditioning { lambda: f64, beta: f64, min_tau: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("EM iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for numerical failures (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Conditioning { .. } => true,
            Error::Iteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
