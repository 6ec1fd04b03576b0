use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch; `axis` names the offending dimension.
    #[error("dimension error in {op} on axis {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: String,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("mask has no active pixel")]
    NoActivation,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{what}: parse error at byte {offset}: {detail}")]
    Parse {
        what: String,
        offset: usize,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data: {0}")]
    Data(String),

    #[error("autodiff: {0}")]
    Graph(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
