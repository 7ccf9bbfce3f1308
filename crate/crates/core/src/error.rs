// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout `cage_core`.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced while building, propagating or evaluating attributions.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Segmentation found nothing but whitespace.
    #[error("no units")]
    NoUnits,

    /// Shapes of two inputs disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A caller-supplied argument is outside its domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A table or graph has a nonzero entry at or beyond the diagonal.
    #[error("causality violation at row {row}, column {col} (value {value})")]
    Causality {
        /// Generated-unit row (0-based).
        row: usize,
        /// Global column (0-based).
        col: usize,
        /// The offending entry.
        value: f64,
    },

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite {
        /// Row (0-based).
        row: usize,
        /// Column (0-based).
        col: usize,
    },

    /// Mixed token-level and sentence-level inputs.
    #[error("unit level mismatch: expected {expected}, found {found}")]
    UnitLevel {
        /// Level the operation requires.
        expected: &'static str,
        /// Level that was supplied.
        found: &'static str,
    },

    /// The backend cannot return next-token distributions.
    #[error("distributions unavailable; use the perturbation (pert) method instead")]
    DistributionsUnavailable,

    /// Failure talking to a remote backend. Retrying may succeed.
    #[error("transport error: {message}")]
    Transport {
        /// Human readable cause.
        message: String,
        /// Whether the request can be retried as-is.
        retryable: bool,
    },

    /// The backend answered but the answer is unusable.
    #[error("backend error: {0}")]
    Backend(String),

    /// A record in a line-oriented file could not be parsed or validated.
    #[error("{path}:{line}: {message}")]
    Record {
        /// File being read.
        path: PathBuf,
        /// 1-based line number.
        line: usize,
        /// What went wrong.
        message: String,
    },

    /// Structured-text (de)serialization failure.
    #[error("format error: {0}")]
    Format(#[from] serde_json::Error),

    /// Filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that may go away when the same request is repeated.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport { retryable: true, .. })
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
