//! Differentiable operators. Each one is a method on [`Tape`](crate::Tape)
//! that computes its forward value and records a backward rule.

mod activation;
mod attention;
mod basic;
mod conv;
pub mod init;
mod layout;
mod matmul;
mod norm;
mod pool;
mod resize;

pub use activation::{gelu, normal_cdf, sigmoid, softmax_rows, Activation};
pub use conv::{conv2d_forward, conv_transpose2d_forward, ConvSpec};
pub use matmul::matmul_tensors;
pub use norm::{BatchStats, Mode, RunningStats, BN_EPSILON, BN_MOMENTUM, LN_EPSILON};
pub use resize::{resize_plane, resize_tensor};

pub(crate) use attention::attention_scale;
