//! Error type shared by every module of the lab.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose shapes cannot be combined.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A function was evaluated outside its domain (e.g. an unguarded log).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged at {stage} step {step}: {loss} is not finite")]
    Diverged {
        stage: &'static str,
        step: usize,
        loss: &'static str,
    },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("attack failed: {0}")]
    Attack(String),

    #[error("invalid configuration: {}", .keys.join(", "))]
    Config { keys: Vec<String> },

    #[error("missing upstream artifact {path} (produced by stage `{stage}`)")]
    Dependency { path: PathBuf, stage: &'static str },

    #[error("malformed archive: {0}")]
    Archive(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
