//! Modulation classification from diffusion features.
//!
//! Pipeline: synthesize impaired IQ signals ([`synth`]), train a 1D
//! noise-prediction U-Net on unlabeled signals ([`unet`], [`diffusion`]),
//! pool and fuse its block activations into a small trainable head
//! ([`daffus`]) and evaluate under limited-label protocols ([`eval`]).

pub mod checkpoint;
pub mod daffus;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod real;
pub mod rng;
pub mod synth;
pub mod unet;

pub use error::{Error, Result};
