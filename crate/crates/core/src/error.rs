use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    Shape { shape: Vec<usize>, len: usize },

    #[error("invalid rank k={k} for a {rows}x{cols} matrix")]
    InvalidRank { k: usize, rows: usize, cols: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sequence of length {len} exceeds context length {context_len}")]
    ContextOverflow { len: usize, context_len: usize },

    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("character {ch:?} at position {position} is not in the alphabet")]
    UnknownSymbol { ch: char, position: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("number decode error at position {position}: {reason}")]
    Decode { position: usize, reason: &'static str },

    #[error("number {value} cannot be encoded: {reason}")]
    Encode { value: f64, reason: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error: missing column {0:?}")]
    MissingColumn(String),

    #[error("line {line}: {message}")]
    Row { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
