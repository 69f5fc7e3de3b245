//! seUNet-Trans: a UNet feature extractor feeding a spatial-reduction
//! transformer head, for binary segmentation.
//!
//! All math is generic over [`Scalar`]; the aliases below fix the two
//! precisions used in practice (`f32` for training, `f64` for gradient
//! checks).

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = model::SeUNetTrans<f32>;
pub type Model64 = model::SeUNetTrans<f64>;
