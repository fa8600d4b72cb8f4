use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("rank error: {0}")]
    Rank(String),
    #[error("batch norm running statistics not initialized: {0}")]
    UninitializedStats(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("structural error in layer `{layer}`: {message}")]
    Structural { layer: String, message: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn structural(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Structural {
            layer: layer.into(),
            message: message.into(),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
