use thiserror::Error;

#[derive(Debug, Error)]
pub enum DstError {
    #[error("empty attention support")]
    EmptyAttentionSupport,

    #[error("empty sequence")]
    EmptySequence,

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("token index {index} out of bounds for table with {rows} rows")]
    IndexOutOfBounds { index: usize, rows: usize },

    #[error("unknown slot: {0}")]
    UnknownSlot(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("invalid data: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, DstError>;

impl DstError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        DstError::Io { context: context.into(), source }
    }

    pub fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        DstError::Parse { path: path.into(), message: message.into() }
    }
}
