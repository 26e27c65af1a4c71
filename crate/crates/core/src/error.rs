use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("subject {subject}: {message}")]
    Subject { subject: String, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn subject(subject: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Subject {
            subject: subject.into(),
            message: message.into(),
        }
    }
}
