//! Encoder-free blind source separation.
//!
//! A latent source matrix, an observation-space mixer, per-source
//! locality-biased transformer branches scored by masked patch
//! reconstruction, and an ordered multi-scale controller are optimized
//! jointly by reverse-mode autodiff. Post-hoc evaluation matches recovered
//! trajectories to references by absolute correlation; a classical
//! whitening + joint-diagonalization baseline is included for comparison.

pub mod config;
pub mod controller;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod figures;
pub mod io;
pub mod numerics;
pub mod objective;
pub mod patching;
pub mod strformer;
pub mod trainer;

pub use error::{Error, Result};
