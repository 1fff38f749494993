use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, widths, indices or other settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("empty input to {op}")]
    EmptyInput { op: &'static str },

    #[error("CTC infeasible: {frames} frames cannot emit {targets} targets (need {required})")]
    CtcInfeasible {
        frames: usize,
        targets: usize,
        required: usize,
    },

    #[error("instance too large for exhaustive enumeration: {0}")]
    GuardExceeded(String),

    #[error("unknown language id {0}")]
    UnknownLanguage(usize),

    #[error("corrupt data for utterance {id}: {reason}")]
    CorruptData { id: String, reason: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Layer {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a location (e.g. "layer 3") to an error raised deeper down.
    pub fn at(self, context: impl Into<String>) -> Self {
        Error::Layer {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips any location wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self.root(),
            Error::Config(_) | Error::UnknownLanguage(_) | Error::Json(_)
        )
    }
}
