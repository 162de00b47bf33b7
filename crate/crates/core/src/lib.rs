//! Hierarchical self-attention encoder and variational autoencoder for
//! closed-set and open-set human activity recognition from multi-placement
//! wearable sensors.
//!
//! The crate is `no_std` and only needs `alloc`. It carries everything that is
//! pure computation: a dense reverse-mode autodiff engine ([`numerics`]), the
//! attention blocks ([`attention`]), the window/session hierarchy
//! ([`encoder`]), the open-set head ([`openset`]), windowing and splits
//! ([`data`]) and the training/evaluation drivers ([`train`], [`metrics`],
//! [`experiment`]). File formats, checkpoints and the command line live in the
//! companion `hsa` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod layers;
pub mod data;
pub mod diagnostics;
pub mod encoder;
mod error;
pub mod experiment;
pub mod metrics;
pub mod numerics;
pub mod openset;
pub mod train;

pub use error::{Error, Result};

/// The single seedable generator type used for initialization, shuffling,
/// dropout and reparameterization.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the generator for a given seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
