use std::fmt;

/// Error type shared across the crate.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration or argument combination.
    Config(String),
    /// Non-finite values, divergence, or a failed numeric verification.
    Numeric(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Malformed or incompatible on-disk artifact (dataset, checkpoint).
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
