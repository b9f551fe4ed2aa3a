//! Vision-guided multimodal abstractive summarization with summary-oriented
//! auxiliary objectives.
//!
//! The crate is `no_std` (with `alloc`) and contains every numeric piece:
//! a small reverse-mode autodiff engine, the text/vision encoder-decoder,
//! the MAS, Vis2Sum and masked-image objectives, corpus handling and a
//! synthetic corpus generator, ROUGE scoring and the training loop. File
//! formats and the command line live in the `sovmas` crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

mod error;

pub mod data;
pub mod model;
pub mod objectives;
pub mod rouge;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Deterministic RNG used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
