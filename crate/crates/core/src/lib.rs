pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod encoder;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod signal;
pub mod text;

pub use error::{Error, Result};
