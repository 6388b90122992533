//! Dense tensors, eager kernels, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod graph;
pub mod kernels;
pub mod ops;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{graph_rotate, Gradients, Graph, RotationTable, Var};
pub use ops::{gelu, layer_norm, matmul, softmax_masked};
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;
