//! Interleaved latent visual reasoning on a tiny causal transformer.
//!
//! A model alternates text tokens with fixed-length segments of continuous
//! latent vectors. During the first training stage each latent segment is
//! supervised by `K` feature vectors that a momentum (EMA) teacher selects
//! from the corresponding helper image; the second stage trains on text only
//! while the model feeds its own hidden states back as latent inputs.
//!
//! Modules, bottom-up:
//! - [`tasks`]: synthetic grid-navigation and counting trajectories.
//! - [`model`]: the transformer, frozen patch encoder, and checkpoints.
//! - [`interleave`]: sequence construction, validation, forward and decoding.
//! - [`teacher`]: EMA parameters and supervision-target selection.
//! - [`train`]: losses, AdamW, the two-stage loop, and evaluation.
//! - [`heatmap`]: relevance maps of generated latents over helper images.

pub mod error;
pub mod heatmap;
pub mod interleave;
pub mod model;
pub mod tasks;
pub mod teacher;
pub mod train;
pub mod vocab;

pub use error::{IlvrError, Result};
