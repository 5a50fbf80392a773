//! Crate-wide error type.

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument is outside its documented domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A config file or config combination is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A file could not be read, written, or decoded.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A checkpoint or dataset file is malformed or inconsistent.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
