use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's shape or argument contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An invalid configuration value (bad temperature, indivisible patch, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A malformed file. `offset` is the byte offset where decoding failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Labeled data that does not match the task (e.g. out-of-range class id).
    #[error("data error: {0}")]
    Data(String),

    #[error("empty body: no voxel above {threshold} HU")]
    EmptyBody { threshold: f32 },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("phantom generation failed: could not place class {class:?} after {retries} retries")]
    Placement { class: String, retries: usize },

    #[error("division guard: {0}")]
    DivisionGuard(String),

    #[error("non-finite loss at step {step}: loss={loss}, grad norms: {grad_norms}")]
    NonFiniteLoss {
        step: u64,
        loss: f64,
        grad_norms: String,
    },

    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Data(_) => "data",
            Error::EmptyBody { .. } => "empty_body",
            Error::Sampling(_) => "sampling",
            Error::Placement { .. } => "placement",
            Error::DivisionGuard(_) => "division_guard",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Fold { .. } => "fold",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
