//! Multi-scale boosted dehazing laboratory.
//!
//! A deterministic, CPU-only implementation of a boosted encoder-decoder
//! dehazing network: a minimal tensor engine with exact reverse-mode
//! gradients, the atmospheric scattering model and boosting verification
//! harness, the multi-scale network with selectable decoder variants and
//! dense feature fusion, a training loop, and image-quality metrics.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod haze;
pub mod image_io;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
