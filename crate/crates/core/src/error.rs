use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FlowsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlowsError {
    #[error("configuration error: {key}: {message}")]
    Config { key: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error at byte offset {offset} in {}: {message}", path.display())]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value in `{name}`: {message}")]
    NonFinite { name: String, message: String },

    #[error("checkpoint incompatible with configuration: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl FlowsError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        FlowsError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        FlowsError::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            FlowsError::Config { .. } => 2,
            FlowsError::NonFinite { .. } => 4,
            _ => 3,
        }
    }
}
