use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:.3e})")]
    Divergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("rank deficient data: rank {rank} < required {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("inconsistent linear system: residual {residual:.3e} exceeds tolerance {tol:.1e}")]
    Inconsistent { residual: f64, tol: f64 },

    #[error("incomplete cost observations: missing probe ({0}, {1})")]
    IncompleteData(usize, usize),

    #[error("invalid state: {0}")]
    State(String),

    #[error("LP solver failure after {iterations} iterations: {message}")]
    Solver { iterations: usize, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// True for failures that stem from the numerics rather than from the
    /// caller's input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::Singular(_)
                | Error::RankDeficient { .. }
                | Error::Inconsistent { .. }
                | Error::Solver { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
