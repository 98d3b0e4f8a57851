use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("lookup error: unknown utterance id '{0}'")]
    Lookup(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A config key failed schema validation. `key` is the dotted path.
    #[error("schema error at '{key}': {msg}")]
    Schema { key: String, msg: String },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("stage '{stage}' requires '{prerequisite}' to have run first (missing {artifact})")]
    Dependency {
        stage: String,
        prerequisite: String,
        artifact: PathBuf,
    },

    #[error("refusing to overwrite {0} (pass --force)")]
    Exists(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
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
