//! Error type shared by every module of the engine.

use thiserror::Error;

use crate::triangle::TriangleKind;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected a {expected} triangle, got a {found} one")]
    KindMismatch {
        expected: TriangleKind,
        found: TriangleKind,
    },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("no convergence after {iterations} iterations: {message}")]
    Convergence {
        iterations: usize,
        message: String,
        /// Last coefficient iterate reached before giving up.
        last_iterate: Vec<f64>,
    },

    #[error("degenerate fit: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("model not identifiable: {0}")]
    Identifiability(String),

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("experiment failed: {0}")]
    Experiment(String),
}

impl Error {
    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::KindMismatch { .. } => "kind_mismatch",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Singular(_) => "singular",
            Error::Convergence { .. } => "convergence",
            Error::Degenerate(_) => "degenerate",
            Error::Dimension(_) => "dimension",
            Error::InvalidInput(_) => "invalid_input",
            Error::Identifiability(_) => "identifiability",
            Error::Optimizer(_) => "optimizer",
            Error::Experiment(_) => "experiment",
        }
    }
}
