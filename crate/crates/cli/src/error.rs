use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Input {
        path: PathBuf,
        #[source]
        source: reserve_lab::Error,
    },

    #[error("{context}: {source}")]
    Engine {
        context: String,
        #[source]
        source: reserve_lab::Error,
    },

    #[error("writing {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serializing the report: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn engine(context: impl Into<String>) -> impl FnOnce(reserve_lab::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Engine { context, source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Input { source, .. } | CliError::Engine { source, .. } => source.kind(),
            CliError::Output { .. } => "output",
            CliError::Json(_) => "serialization",
        }
    }

    /// Object printed on standard error.
    pub fn to_object(&self) -> ErrorObject {
        ErrorObject {
            error: ErrorBody {
                kind: self.kind(),
                message: self.to_string(),
            },
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorObject {
    pub error: ErrorBody,
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub kind: &'static str,
    pub message: String,
}
