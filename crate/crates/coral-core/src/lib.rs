//! Desk-scale correspondence alignment for diffusion-transformer attention.
//!
//! The crate builds up from pure dense-matching primitives to a small
//! trainable denoiser:
//!
//! - [`grid`]: descriptor grids, masks, cost maps, flows, correspondences.
//! - [`cord`]: the CORD v1 grid file container.
//! - [`matching`]: cosine cost maps, argmax flows, cycle-consistency
//!   filtering, pseudo-ground-truth extraction, PCK, warping.
//! - [`attention`]: four-segment token sequences, 2D rotary embeddings,
//!   full attention, person→garment sub-attention, soft/hard
//!   correspondence readout, and row entropy with analytic gradients.
//! - [`losses`]: velocity, correspondence-distillation, entropy, and
//!   feature-alignment objectives plus a gradient-check harness.
//! - [`model`]: the diptych denoiser with hand-written backward passes,
//!   pose injection, checkpoints, and an Euler sampler.
//! - [`train`]: optimizers and the training step.
//! - [`synth`]: synthetic diptych tasks with known correspondences.

pub mod attention;
pub mod cord;
pub mod error;
pub mod grid;
pub mod losses;
pub mod matching;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{CoralError, Result};
