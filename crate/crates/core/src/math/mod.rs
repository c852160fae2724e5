//! Numeric substrate: tensors plus the operation tape used for gradients.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Elementwise, Graph, Operand, Var};
pub(crate) use graph::argmax_first;
pub use tensor::Tensor;

/// The tape type recorded during one training step.
pub type ComputationRecord = Graph;
