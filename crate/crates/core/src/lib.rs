//! Multi-view scene text recognition: a CNN feature extractor feeds an
//! attention LSTM decoder that emits one character per step. Everything from
//! the tensor ops up (autodiff, training, data synthesis, visualization,
//! benchmarking) is implemented here with deterministic, seed-driven behavior
//! throughout.

pub mod alphabet;
pub mod autodiff;
pub mod bench;
pub mod checks;
pub mod cnn;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod model;
pub mod params;
pub mod rng;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
