use std::path::PathBuf;

use crate::uncertainty::MetricKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("{}:{line}: {message}", path.display())]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("metric {metric} unavailable for sample '{sample_id}', view '{view}': {reason}")]
    MetricUnavailable {
        metric: MetricKind,
        sample_id: String,
        view: String,
        reason: String,
    },

    #[error("sample '{sample_id}' has no view '{view}'")]
    MissingView { sample_id: String, view: String },

    #[error("sample '{sample_id}' has no true_class; evaluation requires labels")]
    Unlabeled { sample_id: String },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("view table was fitted with {table} but inference was asked to use {requested}")]
    MetricMismatch {
        table: MetricKind,
        requested: MetricKind,
    },

    #[error("training diverged at epoch {epoch} (loss {loss}); try a smaller learning rate than {learning_rate}")]
    Divergence {
        epoch: usize,
        loss: f64,
        learning_rate: f64,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
