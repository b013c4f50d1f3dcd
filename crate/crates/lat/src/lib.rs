//! Linguistically-aware attention mechanisms as a trainable numerical
//! library, plus a synthetic benchmark harness that exercises them.
//!
//! The crate bundles:
//!
//! - [`tensor`]: a small dense-f64 engine with reverse-mode autodiff,
//!   LSTM/GRU cells, batch normalization, Adam, and a finite-difference
//!   gradient oracle;
//! - [`embedding`]: word-vector tables loaded from text files, mapping
//!   question words and object class labels into one linguistic space;
//! - [`features`]: per-image bundles of visual (V), linguistic (L), and
//!   normalized box (B) features;
//! - [`counting`]: a co-attentive counting model with a Tucker-factored
//!   bilinear count regressor;
//! - [`adapters`]: gated-tanh visual attention with a linguistic branch,
//!   injected into three simplified VQA decoders;
//! - [`captioning`]: a dual-LSTM captioning cell with visual and
//!   linguistic attention streams;
//! - [`synth`], [`train`], [`cli`]: a seeded synthetic-world generator
//!   with a count oracle, training/evaluation/ablation drivers, and the
//!   `lat` command-line binary on top of them.
//!
//! Start with the `examples/` directory: each file is a runnable tour of
//! one capability.

pub mod adapters;
pub mod captioning;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod counting;
pub mod embedding;
pub mod error;
pub mod features;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{LatError, Result};
pub use tensor::Tensor;

use rand_chacha::rand_core::SeedableRng;

/// The crate-wide deterministic RNG.
pub type Rng = rand_chacha::ChaCha20Rng;

/// Seeded RNG constructor used everywhere randomness is needed; ChaCha20
/// keeps streams reproducible across platforms and releases.
pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
