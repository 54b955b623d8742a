//! Noise-bank restricted diffusion for goal-oriented image transmission.
//!
//! A small conditional denoiser is trained with forward diffusion whose noise
//! is drawn only from a pre-sampled, seed-reproducible noise bank. The
//! transmitter then sends the semantic condition of an image plus a single
//! bank index; the receiver regenerates the image by conditional reverse
//! diffusion started from that bank vector.

pub mod bank;
pub mod channel;
pub mod config;
pub mod controller;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod image_io;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod semantics;
pub mod tensor;

mod wire;

pub use bank::{build_bank, select_noise, NoiseBank, RadiusReport};
pub use denoiser::{DenoiserConfig, DenoiserModel};
pub use diffusion::{NoiseSchedule, NoisePredictor};
pub use error::{Error, Result};
pub use semantics::{Scene, SemanticCondition};
pub use tensor::{Shape, Tensor};
