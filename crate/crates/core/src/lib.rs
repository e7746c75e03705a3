//! Scaled dot-product attention, a multi-head encoder-decoder Transformer
//! with hand-written reverse-mode gradients, a training loop for synthetic
//! sequence tasks, and measurement tools.
//!
//! Every numeric routine is generic over [`scalar::Scalar`]. The aliases
//! below fix the scalar to `f64`, which is what training and the command
//! line use.

pub mod analysis;
pub mod attention;
pub mod autograd;
pub mod cli;
pub mod error;
pub mod multihead;
pub mod numerics;
pub mod scalar;
pub mod tasks;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = numerics::Matrix<f64>;
pub type AttentionResult64 = attention::AttentionResult<f64>;
pub type MhaParams64 = multihead::MhaParams<f64>;
pub type MhaResult64 = multihead::MhaResult<f64>;
pub type ModelParams64 = transformer::ModelParams<f64>;
pub type AttentionMaps64 = transformer::model::AttentionMaps<f64>;
pub type OptimizerState64 = training::OptimizerState<f64>;
pub type TrainOutcome64 = training::TrainOutcome<f64>;
