use thiserror::Error;

/// Errors produced by the engine.
#[derive(Error, Debug)]
pub enum CfrError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Format { msg: String, line: Option<usize> },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CfrError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CfrError::Shape(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        CfrError::Argument(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        CfrError::Format { msg: msg.into(), line: None }
    }

    pub fn format_at(msg: impl Into<String>, line: usize) -> Self {
        CfrError::Format { msg: msg.into(), line: Some(line) }
    }
}

pub type Result<T> = std::result::Result<T, CfrError>;
