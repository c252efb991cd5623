use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("blank image: no block passes the variance threshold")]
    BlankImage,

    #[error("degenerate bounding box {0:?}")]
    DegenerateBbox((u32, u32, u32, u32)),

    #[error("shape mismatch at {layer}: expected {expected:?}, got {got:?}")]
    Shape {
        layer: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("incompatible checkpoint {path}: {reason}")]
    Incompatible { path: PathBuf, reason: String },

    #[error("no minutiae survived for {0}")]
    NoMinutiae(String),

    #[error("section mismatch: patch belongs to section {patch}, classifier serves section {classifier}")]
    SectionRouting { patch: usize, classifier: usize },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad arguments or protocol misuse rather than
    /// a failure while doing the work. The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::MissingRoot(_)
                | Error::Config(_)
                | Error::Protocol(_)
                | Error::Incompatible { .. }
                | Error::SectionRouting { .. }
        )
    }
}
