pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod lstm;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod training;
pub mod vocab;

pub use config::{Ablation, ExperimentConfig, ModelConfig, TrainConfig};
pub use error::{Error, Result};
