//! Three-level fMRI decoding into generative guidance.
//!
//! Voxel vectors from three cortical regions are mapped to a text latent
//! (`ventral`), an image embedding refined by a diffusion prior
//! (`nsdgeneral`) and a spatial layout latent (`early`). The guidance levels
//! are composed by an img2img generator and scored with the usual
//! reconstruction metric battery. Every heavyweight pretrained model sits
//! behind a plugin trait with a deterministic reference implementation so
//! the whole pipeline trains and runs on synthetic data.

pub mod checkpoint;
pub mod data;
pub mod diffusion_prior;
pub mod error;
pub mod harness;
pub mod image;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod reconstruction;
pub mod rng;
pub mod stream_high;
pub mod stream_low;
pub mod stream_mid;
pub mod training;

pub use error::{Error, Result};

/// Width of the text latent.
pub const TEXT_LATENT_DIM: usize = 768;
/// Token rows of the image embedding.
pub const EMBED_ROWS: usize = 257;
/// Width of each image embedding row.
pub const EMBED_COLS: usize = 768;
/// Flattened image embedding length.
pub const EMBED_LEN: usize = EMBED_ROWS * EMBED_COLS;
/// Layout latent shape (height, width, channels).
pub const LAYOUT_SHAPE: (usize, usize, usize) = (64, 64, 4);
/// Shape of the low-stream MLP output before the CNN decoder.
pub const LOW_MLP_SHAPE: (usize, usize, usize) = (16, 16, 64);
