//! Trained KV-cache prefixes ("cartridges") on a small frozen transformer.
//!
//! The crate bundles everything needed to build a cartridge, train it by
//! context distillation against the same model reading the full corpus, and
//! take it apart afterwards:
//!
//! - [`numerics`]: dense kernels, Jacobi SVD, softmax / KL / cosine.
//! - [`model`]: a pre-norm decoder with RoPE, forward passes with and without
//!   a cached prefix, and exact reverse-mode gradients into that prefix.
//! - [`cartridge`]: the trainable prefix itself, its initializers, key swaps
//!   and the `.crtg` file format.
//! - [`selfstudy`]: seeded synthetic corpora, QA items and teacher rollouts.
//! - [`distill`]: the Adam training loop and run-directory persistence.
//! - [`analysis`]: singular-value spectra, checkpoint rotations, similarity maps.
//! - [`ablation`]: multiple-choice evaluation and the key-swap experiment.
//! - [`stats`]: hypergeometric tail, paired t-test, quantiles.
//! - [`cli`]: the `cartlab` command surface and scripted experiments.

pub mod ablation;
pub mod analysis;
pub mod cartridge;
pub mod cli;
pub mod distill;
pub mod error;
pub mod model;
pub mod numerics;
pub mod selfstudy;
pub mod stats;

pub use error::{LabError, Result};

/// Token ids. The default vocabulary is byte-level (256 symbols).
pub type Token = u32;

/// Hex SHA-256 of a token sequence, each token as little-endian `u32`.
pub fn token_digest(tokens: &[Token]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Hex SHA-256 of raw bytes.
pub fn bytes_digest(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
