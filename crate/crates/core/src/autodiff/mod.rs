//! Dense-array reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation together with its output value.
//! Parameters live in a [`ParamStore`] and are pulled into a graph by name;
//! [`Graph::backward`] walks the record in reverse and accumulates gradients
//! back into the store, where [`adam_step`] consumes them.

mod array;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod optim;
mod params;

pub use array::DenseArray;
pub use graph::{sigmoid, smooth_l1_value, CustomOp, Gradients, Graph, NodeId, LAYER_NORM_EPS};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::ParamStore;

pub(crate) use graph::{matmul, matmul_at, matmul_bt};

#[cfg(test)]
mod tests;
