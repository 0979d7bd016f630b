//! Self-supervised blind denoising with a learned, signal-dependent noise
//! model.
//!
//! A denoising network (`DNet`) predicts the clean signal under a blind-spot
//! masking scheme, while a small per-pixel network (`NNet`) maps the
//! predicted signal to a Gaussian-mixture noise distribution. Both are
//! trained jointly on noisy images alone.

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod masking;
pub mod metrics;
pub mod networks;
pub mod noise_model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use data::Image2D;
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor4;

pub type Tensor32 = Tensor4<f32>;
pub type Tensor64 = Tensor4<f64>;
pub type Bundle = networks::NetworkBundle<f32>;
pub type Bundle64 = networks::NetworkBundle<f64>;
