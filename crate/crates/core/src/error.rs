use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("space mismatch: {0}")]
    SpaceMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value {value} lies outside the bin range [{low}, {high}]")]
    OutOfRange { value: f64, low: f64, high: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("stage `{stage}` failed: {reason}")]
    Stage { stage: String, reason: String },

    #[error("i/o error: {0}")]
    Io(String),
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

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
