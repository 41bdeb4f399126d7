use std::path::PathBuf;

/// Errors produced across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("task `{0}` is already registered")]
    DuplicateTask(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("relative change undefined for a zero baseline (absolute change {absolute})")]
    UndefinedRate { absolute: f64 },

    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("header/payload length mismatch in {path}: header implies {expected} bytes, file has {found}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("checkpoint at {path} is missing factors for task `{task}`")]
    MissingTaskFactors { path: PathBuf, task: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
