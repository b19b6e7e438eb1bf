//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The crate is generic over its scalar type: f64 drives the verification
//! oracles, f32 the training runs. A computation is recorded on a
//! [`Tape`], producing [`Var`] handles; [`Tape::backward`] replays the
//! recording in reverse to accumulate gradients.
//!
//! ```
//! use ccformer_tensor::{Tape, Tensor64};
//!
//! let mut tape = Tape::new();
//! let x = tape.input(&Tensor64::from_vec(vec![2], vec![3.0, 4.0]).unwrap().with_grad(true));
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[6.0, 8.0]);
//! ```

pub mod cctf;
mod error;
pub mod gradcheck;
mod ops;
mod scalar;
pub mod shape;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::elementwise::{sigmoid_scalar, softplus_scalar};
pub use scalar::Scalar;
pub use tape::{GradSink, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Single-precision tensor used for training.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor used for numerical verification.
pub type Tensor64 = Tensor<f64>;
