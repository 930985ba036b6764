use thiserror::Error;

/// Errors raised anywhere in the lab. The variant decides the CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("load error: {0}")]
    Load(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors that stem from user-supplied configuration or inputs.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
