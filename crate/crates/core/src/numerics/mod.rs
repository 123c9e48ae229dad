//! A small dense tensor engine with define-by-run reverse-mode
//! differentiation. Everything is `f32`, row-major.

mod conv;
mod linalg;
mod nn;
mod ops;
mod tensor;

pub use conv::{conv1d, conv_transpose1d};
pub use linalg::{bmm, linear, matmul};
pub use nn::{activation, gelu, glu, layer_norm, softmax, Activation, KeepMask, NormAxes};
pub use ops::{
    abs, add, add_scalar, add_trailing, concat, mean_all, mul, mul_trailing, narrow, pad, permute, scale, sigmoid, sub,
    sum_all, PadMode,
};
pub use tensor::{grad_enabled, no_grad, Tensor};

pub(crate) use ops::pad_source;
