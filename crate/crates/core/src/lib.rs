pub mod app;
pub mod data;
pub mod encoder;
pub mod error;
#[cfg(test)]
mod fixtures;
pub mod head;
pub mod metrics;
pub mod model;
pub mod neighbors;
pub mod nn;
pub mod parallel;

pub use error::{Error, Result};
