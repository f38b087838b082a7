pub mod association;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pointcloud;
pub mod pose;
pub mod projection;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
