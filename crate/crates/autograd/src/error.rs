use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("shape mismatch at node {node}: {detail}")]
    NodeShape { node: String, detail: String },
    #[error("unbound input `{0}`")]
    Unbound(String),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("non-finite value produced at node {node}")]
    NonFinite { node: String },
    #[error("derive needs a scalar output, node {node} has shape {shape:?}")]
    NotScalar { node: String, shape: Vec<usize> },
    #[error("op `{op}` has no derivative rule")]
    UnsupportedOp { op: &'static str },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;
