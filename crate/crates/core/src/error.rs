use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("summary of an empty sample")]
    EmptySample,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no positive relevance in attribution map")]
    NoPositiveRelevance,

    #[error("k = {k} out of range 1..={max}")]
    BadK { k: usize, max: usize },

    #[error("class {class_id} has no ground truth")]
    NotEvaluable { class_id: u32 },

    #[error("no ground truth annotations")]
    NoGroundTruth,

    #[error("no matched detection to explain")]
    NothingToExplain,

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },

    #[error("dataset has {n} images, need at least {min}")]
    TooSmall { n: usize, min: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{}:{line}:{column}: parse error: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 3 when a metric is
    /// undefined for the given inputs, 2 for every input or validation error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NoGroundTruth
            | Error::NothingToExplain
            | Error::NotEvaluable { .. }
            | Error::NoPositiveRelevance
            | Error::EmptySample => 3,
            _ => 2,
        }
    }
}
