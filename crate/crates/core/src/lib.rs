//! Variational autoencoders with controllable loss weights.

pub mod control;
pub mod data;
pub mod divergences;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
