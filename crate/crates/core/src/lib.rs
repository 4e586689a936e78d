//! Collapsing `Linear -> PReLU -> Linear` blocks into single linear layers
//! once the activation has been trained to (near) linearity.
//!
//! The core is generic over the scalar type (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the training and verification code
//! paths use.

pub mod arch;
pub mod autograd;
pub mod bound;
pub mod collapse;
pub mod error;
pub mod io;
pub mod loss;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = autograd::Tape<f64>;
pub type Model = nn::ModelGraph<f64>;
pub type Model32 = nn::ModelGraph<f32>;
pub type Block = nn::CollapsibleBlock<f64>;
pub type Linear = nn::Linear<f64>;
