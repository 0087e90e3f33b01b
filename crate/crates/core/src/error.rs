use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention over zero regions")]
    EmptyAttention,

    #[error("empty sequence")]
    EmptySequence,

    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("alignment error: {tokens} tokens but {tags} tags")]
    Alignment { tokens: usize, tags: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("recall undefined over an empty evaluation set")]
    UndefinedRecall,

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("refused to aggregate: {0}")]
    Aggregation(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
