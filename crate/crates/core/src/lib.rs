pub mod desiderata;
pub mod error;
pub mod experiments;
pub mod patching;
pub mod tasks;
pub mod transformer;
pub mod tensor;

pub use error::{Error, Result};
