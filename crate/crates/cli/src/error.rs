use thiserror::Error;

/// Failure of a CLI command, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("check failed: {0}")]
    Check(String),

    #[error("{0}")]
    Runtime(eptlab_core::Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config { .. } => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<eptlab_core::Error> for CliError {
    fn from(e: eptlab_core::Error) -> Self {
        match e {
            eptlab_core::Error::Config { field, message } => CliError::Config { field, message },
            eptlab_core::Error::Json(e) => CliError::config("<document>", e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
