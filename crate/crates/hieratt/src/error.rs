use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, naming the op and the shapes involved.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// Bounding box outside the canvas or below the minimum crop size.
    #[error("region error: {0}")]
    Region(String),

    /// Token id outside the vocabulary.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// Bad container magic or unsupported version.
    #[error("checkpoint format error: {0}")]
    Format(String),

    /// Manifest and payload disagree.
    #[error("checkpoint corruption: {0}")]
    Corruption(String),

    /// Annotation referencing a missing record.
    #[error("dataset integrity error: {0}")]
    Integrity(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }
}
