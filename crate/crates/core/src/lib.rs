pub mod calibration;
pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod mixup;
pub mod tensor;

pub use error::{Error, Result};
