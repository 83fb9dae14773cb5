use std::path::PathBuf;

use crate::params::ParamStore;

/// Errors produced anywhere in the counting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation was called with arguments that break its contract.
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("load error at byte {offset}: {msg}")]
    Load { offset: usize, msg: String },

    /// Bad user-supplied input (boxes outside the image, empty splits, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    /// Numerical breakdown during refinement or training.
    #[error("numerical abort at {stage} {index}: {msg}")]
    Numerical {
        stage: &'static str,
        index: usize,
        msg: String,
    },

    /// Training hit a non-finite loss; carries the parameters from the last
    /// finite step.
    #[error("training aborted at step {step}: {msg}")]
    TrainingAborted {
        step: usize,
        msg: String,
        last_good: Box<ParamStore>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::Numerical { .. } | Error::TrainingAborted { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
