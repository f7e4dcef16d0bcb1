//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Matrix products go
//! through `matrixmultiply`; convolutions are lowered to GEMM via im2col.

pub mod graph;
pub mod kernels;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{Gradients, Graph, LeafGradients, Mode, Var};
pub use ops::{pade_eval, BatchNormStats};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{BufferId, Group, ParamId, ParamStore};
pub use scalar::{lit, DType, Scalar};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("no tensor named '{0}'")]
    Missing(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
