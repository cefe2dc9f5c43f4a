pub mod cli;
pub mod error;
pub mod labelspace;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod plots;
pub mod rng;
pub mod sampling;
pub mod screening;
pub mod strategies;
pub mod synthgen;
pub mod volume;

pub use error::{Error, Result};
