//! Dense `f32` tensors with a small reverse-mode autodiff tape, specialised
//! for single-volume 3D convolutional networks on the CPU.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::Dims3;
pub use optim::Adam;
pub use tensor::Tensor;
