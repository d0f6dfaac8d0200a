//! Sliding-window attention fused with residual linear attention.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for common uses.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod efficiency;
pub mod error;
pub mod kvconfig;
pub mod layer;
pub mod linear;
pub mod model;
pub mod oracle;
pub mod rla;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ModelParams32 = model::ModelParams<Tensor<f32>>;
pub type ModelParams64 = model::ModelParams<Tensor<f64>>;
