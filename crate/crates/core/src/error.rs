use thiserror::Error;

use crate::tensor::{Layout, Shape3};

/// Errors raised by tensor, kernel, layer and network operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("flat index {index} out of range for {len} elements")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("chunked-4 index maps need a layer count divisible by 4, got {0}")]
    UnpaddedLayers(usize),

    #[error("expected {expected:?} layout, got {actual:?}")]
    LayoutMismatch { expected: Layout, actual: Layout },

    #[error("data length {actual} does not match shape {shape:?} ({expected} elements)")]
    DataLength {
        shape: Shape3,
        expected: usize,
        actual: usize,
    },

    #[error("padded channel slot at flat index {0} is non-zero")]
    NonZeroPadding(usize),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Shape3, actual: Shape3 },

    #[error("invalid convolution spec: {0}")]
    InvalidConvSpec(String),

    #[error("invalid pooling spec: {0}")]
    InvalidPoolSpec(String),

    #[error("invalid granularity g={g} for {layers} output layers")]
    InvalidGranularity { g: usize, layers: usize },

    #[error("weight bank size mismatch: {0}")]
    WeightSize(String),

    #[error("node `{node}`: {source}")]
    Node {
        node: String,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown node id `{0}` in granularity plan")]
    UnknownPlanNode(String),

    #[error("network definition: {0}")]
    Network(String),

    #[error("worker pool: {0}")]
    Pool(String),
}

impl Error {
    pub(crate) fn at_node(self, node: &str) -> Self {
        Error::Node {
            node: node.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
