//! Dense tensors and a small reverse-mode autodiff tape covering the
//! operations the forecaster needs.

mod graph;
mod scalar;
mod tensor;

pub use graph::{gelu_derivative, gelu_scalar, BatchNormState, Graph, Mode, PointLoss, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

