use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("hazard level {level} returned {value} at t={t} on path {path}")]
    Hazard { level: usize, path: usize, t: f64, value: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("declared bound violated: {0}")]
    Bound(String),
    #[error("driver admissibility probe failed: {0}")]
    Probe(String),
    #[error("regression failure: {0}")]
    Regression(String),
    #[error("measure change impossible: {0}")]
    MeasureChange(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
