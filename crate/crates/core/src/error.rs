use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index ({c}, {i}, {j}) out of range for {channels}x{height}x{width} map")]
    IndexOutOfRange {
        c: usize,
        i: usize,
        j: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("numeric instability: {0}")]
    NumericInstability(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("value outside domain: {0}")]
    Domain(String),
    #[error("could not place {requested} boxes without overlap (placed {placed})")]
    Placement { requested: usize, placed: usize },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
