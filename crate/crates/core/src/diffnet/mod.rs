//! Differentiable numerical core: tensors, reverse-mode gradients with
//! second-order support, and transformer building blocks.

mod arch;
pub mod gradcheck;
mod graph;
pub mod nn;
mod params;
mod tensor;

pub use arch::ArchConfig;
pub use graph::{sigmoid, Graph, Var};
pub use params::{Bound, ParamStore, TensorInfo};
pub use tensor::{Shape, Tensor};
