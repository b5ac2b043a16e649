//! Domain-adversarial training and online test-time adaptation for WiFi
//! CSI human activity recognition.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type for everyday use.

pub mod archive;
pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod tta;

pub use error::{DattaError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type SourceStatistics32 = train::SourceStatistics<f32>;
pub type SourceStatistics64 = train::SourceStatistics<f64>;
pub type Adaptor32 = tta::Adaptor<f32>;
pub type Adaptor64 = tta::Adaptor<f64>;
pub type AdaptationState32 = tta::AdaptationState<f32>;
pub type AdaptationState64 = tta::AdaptationState<f64>;
