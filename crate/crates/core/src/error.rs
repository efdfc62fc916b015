use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A state or adjoint left the finite range during a rollout.
    #[error("non-finite {what} at step {step}, path {path}")]
    Divergence {
        what: &'static str,
        step: usize,
        path: usize,
    },

    #[error("optimizer produced a non-finite parameter at coordinate {0}")]
    OptimizerDiverged(usize),

    #[error("{failed} of {total} runs failed; at least half must succeed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("malformed snapshot (line {line}): {msg}")]
    Snapshot { line: usize, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that come from the numerics rather than from inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::OptimizerDiverged(_) | Error::TooManyFailures { .. }
        )
    }
}
