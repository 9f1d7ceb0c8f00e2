pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod token_refiner;
pub mod topic_refiner;
pub mod trainer;
pub mod user_refiner;

pub use error::{Error, Result};
