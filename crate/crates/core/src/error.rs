use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Non-finite values or a failed factorization.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    /// A shot arrived out of order on a stream.
    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn numeric_in_layer(layer: usize, kind: &str, what: &str) -> Self {
        Error::Numeric(format!("layer {layer} ({kind}): {what}"))
    }

    /// Process exit code for the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Argument(_) => 2,
            Error::Parse { .. } | Error::Data(_) | Error::Io(_) | Error::Serialization(_) => 3,
            Error::Numeric(_) | Error::Sequencing(_) => 4,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
