//! Paired-image editing with a relation adapter on a miniature diffusion
//! transformer.
//!
//! The crate is a small, fully deterministic training and evaluation stack:
//! a reverse-mode autodiff tape over dense tensors, a patch-based
//! transformer backbone conditioned on clean source images, a decoupled
//! prompt-pair adapter (plus a token-concatenation baseline), rectified-flow
//! training with an Euler sampler, procedural paired-image datasets, and
//! pixel/feature metrics. Everything is seeded; two runs with the same
//! config produce byte-identical artifacts.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod editor;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
