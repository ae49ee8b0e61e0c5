//! Reverse-mode automatic differentiation over small dense `f64` tensors.

mod graph;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamConfig, ParamStore};
pub use tensor::{argmax, Tensor};
