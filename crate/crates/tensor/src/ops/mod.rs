//! Differentiable operations, implemented as methods on [`crate::Graph`].

mod activation;
mod conv;
mod elementwise;
mod linalg;
mod norm;
mod resample;
mod shape;

pub use activation::pade_eval;
pub use norm::BatchNormStats;
