//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Every differentiable computation in the crate is composed from the
//! primitives on [`Tape`]: matrix products, softmax variants, layer
//! normalization, row-wise L2 normalization, rotary rotation, slicing,
//! concatenation and reductions. Gradients accumulate additively when a value
//! feeds several consumers.

pub mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;
