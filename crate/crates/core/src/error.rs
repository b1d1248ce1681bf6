use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("conflict error: {0}")]
    Conflict(String),

    /// A collaborator handed over data that violates an interface contract.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("load error at line {line}: {message}")]
    Load { line: usize, message: String },

    #[error("invalid config field `{field}`: {message}")]
    InvalidField { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidField {
            field: field.into(),
            message: message.into(),
        }
    }
}
