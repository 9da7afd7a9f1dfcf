pub mod decoder;
pub mod error;
pub mod experiments;
pub mod flops;
pub mod model;
pub mod neural;
pub mod smartcrop;
pub mod stats;
pub mod tasks;

pub use error::{Error, Result};
