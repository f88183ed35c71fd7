use thiserror::Error;

/// Errors produced while validating inputs or running a procedure.
#[derive(Debug, Error)]
pub enum Error {
    /// Input failed validation (bad parameter, malformed tree, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A specific input row was rejected; `line` is 1-based.
    #[error("line {line}: {msg}")]
    Row { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn row(line: usize, msg: impl Into<String>) -> Self {
        Error::Row {
            line,
            msg: msg.into(),
        }
    }
}
