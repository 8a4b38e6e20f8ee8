//! Dense tensors with reverse-mode automatic differentiation.

mod array;
mod graph;
mod param;

pub use array::{broadcastable, Array};
pub use graph::{vjp, vjp_norm, Gradients, Graph, Tensor, EPS_LOG};
pub use param::Param;

