use std::path::PathBuf;

/// Errors produced across the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("label value {value} at ({row}, {col}) is out of range for {classes} classes")]
    LabelOutOfRange {
        value: u8,
        row: usize,
        col: usize,
        classes: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("click at ({row}, {col}) lies outside the {height}x{width} image")]
    ClickOutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("class {class_id} is out of range for {classes} classes")]
    ClassOutOfRange { class_id: usize, classes: usize },

    #[error("encoding {0} requires context that was not provided")]
    MissingContext(&'static str),

    #[error("encoding {0} does not accept a context")]
    UnexpectedContext(&'static str),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("campaign has no pending patches left")]
    Exhausted,

    #[error("config: {0}")]
    Config(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("busy: {0}")]
    Busy(String),

    #[error("cannot undo: {0}")]
    NotUndoable(String),

    #[error("unavailable: {0}")]
    Unavailable(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
