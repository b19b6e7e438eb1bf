//! Differentiable operations, implemented as inherent methods on
//! [`crate::tape::Tape`]. Each op records its forward value plus, when a
//! gradient is required, a closure encoding the local derivative.

mod conv;
pub mod elementwise;
mod layer_norm;
mod matmul;
mod reduce;
mod shape_ops;
mod softmax;
mod upsample;
