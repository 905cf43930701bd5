use std::path::PathBuf;

use geode_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = GeodeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GeodeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("empty point cloud: {0}")]
    EmptyCloud(String),
    #[error("task `{task}` unsupported: {reason}")]
    Task { task: String, reason: String },
    #[error("out-of-vocabulary words: {}", .0.join(", "))]
    Vocab(Vec<String>),
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("routing: {0}")]
    Routing(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),
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
}

impl GeodeError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn task(task: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Task {
            task: task.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by the user's configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config { .. })
    }
}
