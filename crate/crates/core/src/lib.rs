//! CDGNet: a cross-time dynamic graph encoder-decoder for multi-step traffic
//! forecasting, built on a small reverse-mode autodiff tensor.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod inspect;
pub mod kv;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Cdgnet, ModelConfig, Variant};
pub use tensor::Tensor;
