//! Slice-level convolution kernels shared by the graph ops.

pub mod conv;
pub mod deform;
pub mod pac;
