use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no entities in document `{0}`")]
    NoEntities(String),

    #[error("document `{0}` is empty")]
    EmptyDocument(String),

    #[error("invalid document `{doc}`: {reason}")]
    InvalidDocument { doc: String, reason: String },

    #[error("schema violation in `{doc}` at {path}: {reason}")]
    Schema {
        doc: String,
        path: String,
        reason: String,
    },

    #[error("unknown relation id `{0}`")]
    UnknownRelation(String),

    #[error("empty label name for relation `{0}`")]
    EmptyLabel(String),

    #[error("empty label set")]
    EmptyLabelSet,

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("corpus `{path}` looks corrupt: {skipped} of {total} records skipped")]
    CorruptCorpus {
        path: String,
        skipped: usize,
        total: usize,
    },

    #[error("prediction references unknown document `{0}`")]
    UnknownDocument(String),

    #[error("completion client: {0}")]
    Client(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
