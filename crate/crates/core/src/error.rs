use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset inconsistency: {0}")]
    DatasetInconsistency(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("missing descriptions for relation `{0}`")]
    MissingDescriptions(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite loss at step {step} (batch: {batch_ids:?})")]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },

    #[error("empty memory for seen relation `{0}`")]
    EmptyMemory(String),

    #[error("empty prototype store")]
    EmptyPrototypes,

    #[error("gateway error: {0}")]
    Gateway(String),

    #[error("entity extraction failed: {0}")]
    Extraction(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("run directory {0} is locked by another pipeline")]
    Locked(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }
}
