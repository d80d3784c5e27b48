pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
