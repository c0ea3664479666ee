//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is built eagerly during a forward pass: every op computes its
//! value immediately and records enough to run its backward rule. Nodes are
//! never mutated after creation, so the tape order is a valid reverse
//! topological order for [`Graph::backward`].

mod fused;
mod graph;

pub use fused::{AttnLayout, AttnSegment};
pub use graph::{Gradients, Graph, Segment, Unary, Var};
pub(crate) use graph::gelu as gelu_scalar;
