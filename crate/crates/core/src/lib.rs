pub mod cli;
pub mod contrasts;
pub mod data;
mod error;
pub mod estimator;
mod linalg;
pub mod simulator;
pub mod technique;
pub mod weights;

pub use error::{Error, Result};
