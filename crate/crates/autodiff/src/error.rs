use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar([usize; 2]),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for AutodiffError {
    fn from(e: std::io::Error) -> Self {
        AutodiffError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
