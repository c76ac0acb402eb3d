//! Dense tensors and a small reverse-mode autodiff graph.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use graph::{log_softmax_in_place, softmax_in_place, Bindings, Gradients, Graph, NodeId, Op, LEAKY_SLOPE};
pub use optim::{sgd_step, ParamMap, SgdConfig, SgdState};
pub use tensor::{Element, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape {shape:?} needs a different element count than {len}")]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: NodeId, detail: String },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { node: NodeId, op: &'static str },
    #[error("leaf {name} ({node}) is not bound")]
    Unbound { node: NodeId, name: String },
    #[error("backward requested at node {node} before it was evaluated")]
    BackwardBeforeForward { node: NodeId },
    #[error("seed for node {node} has shape {found:?}, output has {expected:?}")]
    SeedShape {
        node: NodeId,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("gradient shape {found:?} does not match {expected:?}")]
    GradShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("no gradient for parameter {0}")]
    MissingGrad(String),
    #[error("empty graph or tensor list")]
    Empty,
}
