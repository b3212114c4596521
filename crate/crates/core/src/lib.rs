//! Desk-scale laboratory for latent-space cover selection in neural image
//! steganography.
//!
//! The crate is built around a small reverse-mode autodiff engine
//! ([`graph::Graph`]) on dense `f64` tensors. Every learned component — the
//! iterative steganographic codec, the toy diffusion model, the toy GAN and
//! the steganalysis detector — runs on that engine, which makes the whole
//! encode→decode pipeline (including the encoder's internal gradient steps)
//! differentiable end to end. On top sit the experiment layers: synthetic
//! corpora with designed per-pixel variance, latent-space cover selection
//! through frozen generators, waterfilling analysis of where the encoder
//! writes, image-quality metrics, and robustness/steganalysis channels.

pub mod adam;
pub mod analysis;
pub mod channel;
pub mod checkpoint;
pub mod codec;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod gan;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
mod kernels;
pub mod kv;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod select;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, VarId};
pub use tensor::Tensor;
