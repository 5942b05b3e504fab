//! Region-level image adapters for character-consistent text-to-image
//! generation, on top of a small deterministic latent-diffusion engine.
//!
//! The flow has three stages: segment each reference image into face, upper
//! and lower crops using its prompt's cross-attention, derive where each
//! region lands from a text-only layout run, then sample again with one
//! adapter per region confined to that region's layout weighting.

pub mod adapters;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod fixtures;
pub mod image;
pub mod io;
pub mod ops;
pub mod pipeline;
pub mod probe;
pub mod segmentation;
pub mod text;

pub use error::{Error, Result};
