use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid model, grid or parameter set.
    #[error("configuration error: {0}")]
    Config(String),
    /// Argument outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A numerical procedure failed to converge.
    #[error("numerical error at {location}: {message}")]
    Numerical { location: String, message: String },
    /// Reading or writing an artifact failed.
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
