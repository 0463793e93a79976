//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

pub mod gradcheck;
mod graph;
pub mod nn;
mod ops;
pub mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::{concat, weighted_sum};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
