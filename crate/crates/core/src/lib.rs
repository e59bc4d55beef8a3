pub mod capsule;
pub mod config;
pub mod error;
pub mod map;
pub mod model;
pub mod raster;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
