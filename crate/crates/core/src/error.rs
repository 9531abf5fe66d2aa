use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no binding supplied for `{0}`")]
    MissingBinding(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("objective must be a scalar, got shape {0:?}")]
    NonScalarObjective(Vec<usize>),

    #[error("`{op}` has no derivative rule for input {input}")]
    NoDerivative { op: &'static str, input: usize },

    #[error("node belongs to a different graph")]
    ForeignNode,

    #[error("empty sentence")]
    EmptySentence,

    #[error("id {id} out of range for a table with {rows} rows")]
    IdOutOfRange { id: usize, rows: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite {what}")]
    Diverged {
        epoch: usize,
        batch: usize,
        what: &'static str,
    },

    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),

    #[error("label sets differ: {train:?} vs {test:?}")]
    LabelMismatch {
        train: Vec<String>,
        test: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
