pub mod alignment;
pub mod baseline;
pub mod autograd;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod gan;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
