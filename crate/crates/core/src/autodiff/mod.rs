//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, NodeId};
pub use optim::AdamW;
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("input outside the domain of {op} at node {node}")]
    Domain { node: usize, op: &'static str },
    #[error("backward requested from node {node}, which was never computed")]
    NoForward { node: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite gradient; parameters left untouched")]
    NonFiniteGradient,
    #[error("invalid optimizer settings: {0}")]
    InvalidOptimizer(String),
    #[error("parameter store mismatch: {0}")]
    StoreMismatch(String),
    #[error("cannot stack zero tensors")]
    EmptyStack,
}
