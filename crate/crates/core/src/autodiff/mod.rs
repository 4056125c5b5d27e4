//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough saved state to run its adjoint rule. Parameters live in
//! a [`ParameterStore`] and are copied onto the tape with [`Graph::param`];
//! [`Graph::backward`] adds the resulting gradients back into the store.

mod adam;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{BatchStats, Graph, NormMode, Var};
pub use tensor::{ParameterStore, Shape, Tensor};

#[cfg(test)]
mod tests;
