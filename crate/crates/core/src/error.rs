use std::path::PathBuf;

/// Errors surfaced by the engine and the harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value or key is invalid. `key` is the dotted key path.
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("empty source: {0}")]
    EmptySource(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
