use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes disagree along a named axis.
    #[error("{op}: dimension mismatch on axis {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: String,
        detail: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("batch norm needs at least 2 samples in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("degenerate label: {0}")]
    DegenerateLabel(String),

    #[error("AUC undefined: labels contain a single class")]
    UndefinedAuc,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(
        "training diverged at step {step}: non-finite loss (diagnostic checkpoint: {checkpoint})"
    )]
    Diverged { step: u64, checkpoint: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl ToString, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis: axis.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
