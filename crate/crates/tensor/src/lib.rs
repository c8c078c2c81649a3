//! Dense tensors generic over `f32`/`f64`, a reverse-mode autodiff tape,
//! and the handful of layers and optimisers the segmentation model needs.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod scalar;
pub mod tensor;

pub use error::TensorError;
pub use graph::{Gradients, Graph, Var};
pub use kernels::Conv2dSpec;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
