use std::path::PathBuf;

use csda_autodiff::AutodiffError;
use thiserror::Error;

/// Why a corpus record was rejected.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("self-edge on node {0}")]
    SelfEdge(usize),
    #[error("edges contain a cycle")]
    Cycle,
    #[error("node index {index} out of range for {nodes} nodes")]
    IndexOutOfRange { index: usize, nodes: usize },
    #[error("feature dimension {found} differs from corpus dimension {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("node {0} is not reachable from the root")]
    Unreachable(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        source: RecordError,
    },
    #[error("invalid graph: {0}")]
    Graph(#[from] RecordError),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch} (graphs: {graph_ids:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        graph_ids: Vec<String>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
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

pub type Result<T> = std::result::Result<T, Error>;
