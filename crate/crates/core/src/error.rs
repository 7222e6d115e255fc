use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = QaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QaError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("masked softmax: row {row} has no unmasked position")]
    DegenerateMask { row: usize },

    #[error("label error: {0}")]
    Label(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("non-finite value in node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("cannot read {}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {}: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("schema error in {}: missing or invalid field `{field}`", path.display())]
    Schema { path: PathBuf, field: String },

    #[error("{}:{line}: {detail}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("cannot align answer: {0}")]
    Alignment(String),

    #[error("dataset statistics need at least one example")]
    EmptyStats,

    #[error("span start {start} is after end {end}")]
    Ordering { start: usize, end: usize },

    #[error("every position is masked; no span can be decoded")]
    DegenerateSpan,

    #[error("input error: {0}")]
    Input(String),

    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint metadata: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}
