//! Training-free few-shot class-incremental learning driven by a frozen
//! conditional diffusion model.
//!
//! The pipeline trains a feature encoder and a class-conditional denoiser on
//! the base classes once, freezes both, and from then on adds classes purely by
//! synthesis: exemplars sampled with a deterministic DDIM sampler are encoded
//! and averaged into a generative prototype, blended with the few real shots,
//! and classified by cosine similarity.
//!
//! The crate is `no_std` with `alloc`. All transcendental functions go through
//! `libm`, so results are bitwise reproducible across platforms for a given
//! seed. File formats, checkpoints and the command-line driver live in the
//! companion `fscil` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checksum;
pub mod classifier;
pub mod diffusion;
pub mod embedding;
mod error;
pub mod numerics;
pub mod protocol;
pub mod prototypes;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};

/// Integer label of a class. Base classes occupy `0..num_base_classes`, each
/// incremental session appends a contiguous range after that.
pub type ClassId = u32;
