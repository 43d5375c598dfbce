//! One-dimensional U-Net noise predictor.

mod config;
pub mod layers;
mod model;
mod params;
mod train;

pub use config::{UNetConfig, LENGTH_MULTIPLE, NUM_BLOCKS};
pub use model::BlockActivations;
pub use params::{Architecture, ModelParams, TensorSpec};
pub use train::{train_diffusion, AdamW, DiffusionTrainer, TrainHyper};
