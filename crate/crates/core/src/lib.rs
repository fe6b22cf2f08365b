pub mod autograd;
pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod generation;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod plga;
pub mod tensor;
pub mod training;

pub use config::{ModelConfig, ParamCountReport, Variant};
pub use error::{Error, Result};
pub use model::PldrModel;
pub use tensor::{Scalar, Tensor};
