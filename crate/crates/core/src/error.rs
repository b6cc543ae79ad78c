use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest row {row}: {message}")]
    ManifestRow { row: usize, message: String },

    #[error("duplicate contract id `{0}`")]
    DuplicateId(String),

    #[error("duplicate group has conflicting labels: {}", ids.join(", "))]
    ConflictingLabels { ids: Vec<String> },

    #[error("corpus mixes vulnerability types {0} and {1}")]
    MixedVulnTypes(String, String),

    #[error("invalid corpus: {0}")]
    Corpus(String),

    #[error("source is empty after normalization")]
    EmptyAfterNormalization,

    #[error("token id {id} at position {position} is outside the vocabulary (size {vocab_size})")]
    TokenIdOutOfRange {
        position: usize,
        id: usize,
        vocab_size: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label {0} is not 0 or 1")]
    InvalidLabel(i64),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
