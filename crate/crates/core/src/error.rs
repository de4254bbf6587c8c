//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("non-finite value produced by {op} at index {index}: {value}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("degenerate softmax row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFiniteGradient { tensor: String },

    #[error("non-finite parameter after update in tensor `{tensor}`")]
    NonFiniteUpdate { tensor: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {malformed} of {total} lines malformed (> 1%); samples: {samples:?}")]
    Format {
        path: String,
        malformed: usize,
        total: usize,
        samples: Vec<String>,
    },

    #[error("preprocessing left an empty corpus; stage counts: {stages:?}")]
    EmptyCorpus { stages: Vec<(String, usize)> },

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown item key `{0}`")]
    UnknownItem(String),

    #[error("{0}")]
    Config(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
