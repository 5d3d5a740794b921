//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad dimensions, mismatched objective/dataset, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input (empty prefix, context overflow, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Value outside its domain (non-member score, non-score token, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Next-token distribution puts (almost) no mass on the score tokens.
    #[error("degenerate distribution: score-token mass {mass:e} below threshold")]
    DegenerateDistribution { mass: f64 },

    /// Non-finite loss or gradient.
    #[error("numerical error on example {example_id}: {message}")]
    Numerical { example_id: u64, message: String },

    /// Internal shape or bookkeeping bug.
    #[error("internal error: {0}")]
    Internal(String),

    /// Pipeline-level failure (e.g. too many degenerate samples).
    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
