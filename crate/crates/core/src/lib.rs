//! Adversarial residual transform networks for unsupervised domain
//! adaptation, built on a small define-by-run autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common instantiations.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub mod run;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tape::Tape<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type Mlp64 = nn::Mlp<f64>;
pub type Mlp32 = nn::Mlp<f32>;
pub type ArtnModel64 = model::ArtnModel<f64>;
pub type ArtnModel32 = model::ArtnModel<f32>;
