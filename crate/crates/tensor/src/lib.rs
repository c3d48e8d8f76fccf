//! Dense tensors and the differentiable layers needed by a 3D encoder-decoder
//! segmentation network: convolution, transposed convolution, batch
//! normalization, ReLU, channel softmax and residual addition.
//!
//! Every layer exposes an explicit forward/backward pair. Analytic backward
//! passes are verified against central finite differences with [`gradcheck`].

pub mod activation;
pub mod batchnorm;
pub mod checkpoint;
pub mod conv;
mod error;
pub mod gradcheck;
pub mod linalg;
pub mod model;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use real::Real;
pub use tensor::Tensor;

/// Training versus inference behaviour of stateful layers (batch norm).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}
