//! Unified autoregressive model over text tokens and continuous image
//! patches: synthetic data, vision autoencoder, embeddings, causal
//! backbone, LM and diffusion heads, two-stage training, interleaved
//! decoding and checkpointing.
//!
//! All numerics are generic over [`mixmodal_tensor::Scalar`]; the
//! aliases at the bottom fix the scalar to `f32` for training.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod embedding;
pub mod error;
pub mod heads;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sequence;
pub mod synth;
pub mod training;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use config::Config;
pub use error::{Error, Result};
pub use model::Model;
pub use sequence::{Item, MixedSequence};

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Autoencoder32 = synth::Autoencoder<f32>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Trainer32 = training::Trainer<f32>;
pub type MixedSequence32 = MixedSequence<f32>;
