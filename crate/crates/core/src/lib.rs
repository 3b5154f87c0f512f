pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod models;
pub mod noise;
pub mod optim;
pub mod plot;
pub mod results;
pub mod rng;
pub mod tensor;
pub mod trends;

pub use error::{Error, Result};
