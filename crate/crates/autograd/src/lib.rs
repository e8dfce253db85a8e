//! Deterministic reverse-mode differentiation over `f64` tensors.
//!
//! A [`Graph`] is built from primitive ops and evaluated against named
//! input [`Bindings`]. [`Graph::derive`] appends the gradient computation to
//! the same graph as ordinary primitive nodes, so a gradient can itself be
//! differentiated (double backpropagation).

mod error;
mod gradcheck;
mod graph;
mod tensor;

pub use error::{GraphError, Result};
pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport};
pub use graph::{derive, Bindings, Graph, Node, NodeId, Op};
pub use tensor::Tensor;
