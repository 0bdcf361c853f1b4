use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A line of a record stream could not be parsed.
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    /// Well-formed input that violates a catalog or record invariant.
    #[error("{}", match .line {
        Some(l) => format!("line {l}: {message}"),
        None => message.clone(),
    })]
    Validation {
        line: Option<usize>,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain `{0}` has no records")]
    EmptyDomain(String),

    #[error("class distribution undefined: {0}")]
    UndefinedDistribution(String),

    #[error("class {class}: estimate undefined, labeled prior is positive but no labeled boxes were predicted")]
    EstimationUndefined { class: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(message: impl Into<String>) -> Self {
        Error::Validation {
            line: None,
            message: message.into(),
        }
    }

    pub(crate) fn at_line(line: usize, message: impl Into<String>) -> Self {
        Error::Validation {
            line: Some(line),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input rather than by the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}
