use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{kind} backend `{name}` is already registered")]
    DuplicateBackend { kind: String, name: String },

    #[error("no {kind} backend named `{name}` (available: {})", available.join(", "))]
    BackendNotFound {
        kind: String,
        name: String,
        available: Vec<String>,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupt data: {0}")]
    CorruptData(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("scene placement failed: {0}")]
    Placement(String),

    #[error("backend failure{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Backend { step: Option<usize>, message: String },

    #[error("format error: {0}")]
    Format(String),
}

/// Error raised by a backend implementation.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct BackendError(pub String);

impl From<BackendError> for Error {
    fn from(err: BackendError) -> Self {
        Error::Backend {
            step: None,
            message: err.0,
        }
    }
}

impl Error {
    pub(crate) fn at_step(err: BackendError, step: usize) -> Self {
        Error::Backend {
            step: Some(step),
            message: err.0,
        }
    }
}
