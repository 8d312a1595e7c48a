//! Object-centric video segmentation at desk scale.
//!
//! The pipeline encodes frames into patch features, correlates them across
//! time, fuses both cues, and decomposes scenes with a two-stage slot
//! attention over a bank of learnable Gaussian slots. Training is
//! self-supervised with a momentum teacher: dense semantic alignment over
//! Sinkhorn transport plans, a mask-diversity regularizer, and a margin-based
//! instance consistency loss.

pub mod assignment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod slots;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;
