use thiserror::Error;

/// Error categories map onto distinct CLI exit codes: configuration problems,
/// data/format problems and numerical aborts are reported separately.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis mismatch between tensors.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration value or inconsistent model setup.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data (dataset files, labels, manifests).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or other numerical failures during training.
    #[error("numerical error: {0}")]
    Numeric(String),

    /// Checkpoint serialization/deserialization failure; names the section.
    #[error("checkpoint error in section `{section}`: {message}")]
    Checkpoint { section: String, message: String },

    /// API misuse (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn checkpoint(section: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Checkpoint { section: section.into(), message: message.into() }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
