//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DstError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed input: {0}")]
    Format(String),
    #[error("ontology: {0}")]
    Ontology(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("config: {0}")]
    Config(String),
    #[error("model: {0}")]
    Model(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("evaluation: {0}")]
    Evaluation(String),
}

impl DstError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DstError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DstError>;
