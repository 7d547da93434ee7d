//! Wavelet-domain conditional GAN for bone suppression, on a small CPU
//! tensor and layer stack with hand-written backward passes.

pub mod config;
pub mod error;
pub mod impipe;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod theory;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Tensors, networks and trainers at the two supported precisions.
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Generator32 = models::Generator<f32>;
pub type Generator64 = models::Generator<f64>;
pub type Discriminator32 = models::Discriminator<f32>;
pub type Discriminator64 = models::Discriminator<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Trainer64 = training::Trainer<f64>;
