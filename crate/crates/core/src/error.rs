use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),

    #[error("empty batch")]
    EmptyBatch,

    #[error("no replacement token outside the document's token set")]
    NoReplacementToken,

    #[error("{0}")]
    Range(String),

    #[error("candidate {index} has no score for metric {metric}")]
    MissingMetric { index: usize, metric: String },

    #[error("metric {0} requires a scorer model")]
    MissingScorer(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint checksum mismatch")]
    Checksum,

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("beam width {beam_width} is not divisible into {groups} groups")]
    BeamGroups { beam_width: usize, groups: usize },

    #[error("example `{0}` produced no nonempty candidates")]
    NoCandidates(String),

    #[error("no candidate set for training example `{0}`")]
    MissingCandidates(String),

    #[error("example `{id}`: {source}")]
    Example {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numeric divergence during training or scoring.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::NonFinite(_) => true,
            Error::Example { source, .. } => source.is_divergence(),
            _ => false,
        }
    }

    pub(crate) fn in_example(id: &str) -> impl FnOnce(Error) -> Error + '_ {
        move |e| Error::Example {
            id: id.to_string(),
            source: Box::new(e),
        }
    }
}
