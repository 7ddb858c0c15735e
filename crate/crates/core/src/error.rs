//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI reports them: configuration and
//! usage problems, bad or missing input data, and numerical failures
//! during training or inference.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("empty graph: no triplets supplied")]
    EmptyGraph,

    #[error("unknown entity `{0}`")]
    UnknownEntity(String),

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("malformed path: {0}")]
    MalformedPath(String),

    #[error("{file}:{line}: {msg}")]
    MalformedLine {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("filter `{filter}` emptied the dataset (threshold {threshold})")]
    FilterEmptiedDataset { filter: &'static str, threshold: String },

    #[error("empty {0}")]
    EmptyInput(&'static str),

    #[error("sequence length {len} exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss is not finite ({dump})")]
    Diverged { step: usize, dump: String },

    #[error("vocabulary mismatch: expected {expected}, found {found}")]
    VocabularyMismatch { expected: String, found: String },

    #[error("missing artifact `{path}`: {hint}")]
    MissingArtifact { path: String, hint: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit class: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_class(&self) -> u8 {
        match self {
            Error::Config(_) => 1,
            Error::NonFinite(_) | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
