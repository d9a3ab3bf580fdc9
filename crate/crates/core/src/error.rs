use std::path::PathBuf;

use crate::graph::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("node {id} `{name}`: {source}")]
    AtNode {
        id: NodeId,
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("trainable node {0} is not connected to the loss")]
    Unreachable(NodeId),

    #[error("node {0} holds no parameters and cannot be trainable")]
    NotParametric(NodeId),

    #[error("backward requested before a forward pass")]
    NoForward,

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("unidirectionality violated: edge {from} -> {to} feeds the backbone")]
    Unidirectional { from: NodeId, to: NodeId },

    #[error("invariant breach: {0}")]
    Invariant(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported version {found}, expected {expected}")]
    BadVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated file: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn at_node(self, id: NodeId, name: &str) -> Self {
        Error::AtNode {
            id,
            name: name.to_string(),
            source: Box::new(self),
        }
    }
}
