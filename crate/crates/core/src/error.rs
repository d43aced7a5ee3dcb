// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),

    #[error("class id {id} out of range for vocabulary of {size}")]
    ClassOutOfRange { id: usize, size: usize },

    #[error("prompt has {tokens} tokens, exceeding the maximum of {max}")]
    PromptTooLong { tokens: usize, max: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("adaptation produced a non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite or diverging arithmetic.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric { .. } | Error::Diverged { .. } | Error::NonFiniteLoss { .. }
        )
    }
}
