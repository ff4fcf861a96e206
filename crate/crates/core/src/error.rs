use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Empty or inconsistent system description.
    #[error("invalid system: {0}")]
    InvalidSystem(String),

    /// Initial amplitudes that cannot be normalized.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// An argument outside the domain of the operation, e.g. `t >= T`.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration field failed validation. `field` is the dotted path
    /// of the offending entry, e.g. `schedule.T`.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Two paths that must share a time grid do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
