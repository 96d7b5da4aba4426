use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("patch grid of {patches} patches exceeds the budget of {max}")]
    BudgetViolation { patches: usize, max: usize },

    #[error("non-finite value produced in {stage}")]
    NumericFailure { stage: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("page {page}: {message}")]
    Data { page: String, message: String },

    #[error("annotation parse error{}: {message}", record.map(|r| format!(" at record {r}")).unwrap_or_default())]
    Parse {
        record: Option<usize>,
        message: String,
    },

    #[error("checkpoint error in `{entry}`: {message}")]
    Checkpoint { entry: String, message: String },

    #[error("{path}: {source}")]
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

    pub(crate) fn numeric(stage: impl Into<String>) -> Self {
        Error::NumericFailure {
            stage: stage.into(),
        }
    }
}
