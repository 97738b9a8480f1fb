pub mod architectures;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
