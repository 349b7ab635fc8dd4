pub mod autodiff;
pub mod decoder;
pub mod dsrecon;
pub mod encoder;
pub mod error;

pub use error::{Error, Result};
pub mod geometry;
pub mod harness;
pub mod model;
pub mod sim;
pub mod voxel;
