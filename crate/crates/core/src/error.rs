use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed at {location}: {message}")]
    Validation { location: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no eligible few-shot example for task `{task}` ({class} class)")]
    FewShotUnavailable { task: String, class: &'static str },

    #[error("balanced accuracy undefined: {0}")]
    UndefinedMetric(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid contingency table: {0}")]
    InvalidTable(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("logistic fit diverged; column {column} separates the outcome")]
    Divergence { column: usize },

    #[error("degenerate text: {0}")]
    DegenerateText(String),

    #[error("quantile split impossible: {0}")]
    QuantileSplit(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            location: location.into(),
            message: message.into(),
        }
    }
}
