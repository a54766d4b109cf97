pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod checkpoint;
pub mod data;
pub mod densities;
pub mod error;
pub mod flows;
pub mod gradcheck;
pub mod objectives;
pub mod oracle;
pub mod presets;
pub mod trainer;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
