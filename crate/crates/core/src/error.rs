use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every stage of the correction pipeline.
#[derive(Debug, Error)]
pub enum StctError {
    /// An argument is outside the domain of the operation (shape, range, rate).
    #[error("invalid input: {0}")]
    InputDomain(String),

    /// The Gram matrix could not be factorized.
    #[error("singular system: {0}")]
    Singular(String),

    /// A random split would leave one side empty.
    #[error("degenerate split: round({r} * {n}) leaves an empty side")]
    DegenerateSplit { n: usize, r: f64 },

    /// Iterates stopped being finite.
    #[error("diverged: {0}")]
    Divergence(String),

    /// Training cannot make progress (no labeled data).
    #[error("training cannot converge: {0}")]
    NonConvergence(String),

    /// A persisted file does not follow its format.
    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    /// A configuration key is unknown or its value does not parse.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// Wraps a lower-level error with the pipeline location it happened at.
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<StctError>,
    },
}

impl StctError {
    pub fn input(msg: impl Into<String>) -> Self {
        StctError::InputDomain(msg.into())
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        StctError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with all context layers removed.
    pub fn root(&self) -> &StctError {
        match self {
            StctError::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, StctError>;
