pub mod ablation;
pub mod batching;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradient_suite;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
