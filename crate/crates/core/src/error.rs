use std::path::PathBuf;

use thiserror::Error;

use crate::client::CallError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("duplicate probe ids: {}", .0.join(", "))]
    DuplicateProbeIds(Vec<String>),

    #[error("invalid probe {id:?}: {reason}")]
    InvalidProbe { id: String, reason: String },

    #[error("cell ({model}, {probe}) has {have} rows, need at least {need}")]
    UndersizedCell {
        model: String,
        probe: String,
        have: usize,
        need: usize,
    },

    #[error("no positive rows for model {0:?}")]
    NoPositives(String),

    #[error("no negative rows for model {0:?}")]
    NoNegatives(String),

    #[error("training diverged at round {round}: non-finite loss")]
    Diverged { round: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no reference samples from another model for probe {0:?}")]
    NoReference(String),

    #[error("feature schema mismatch: expected {expected} columns, got {got}")]
    SchemaMismatch { expected: usize, got: usize },

    #[error(transparent)]
    Call(#[from] CallError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
