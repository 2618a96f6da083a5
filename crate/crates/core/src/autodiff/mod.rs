//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations as they are executed; [`Graph::backward`]
//! walks the record in reverse and returns a [`Gradients`] table. Parameters
//! live in a [`ParamStore`] outside the graph and are pulled in as leaves with
//! [`Graph::param`], so the same store can feed many short-lived graphs.

mod adam;
mod gemm;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use gemm::gemm;
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
