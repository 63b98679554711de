//! Core algorithms for spatial token generation: a scalar reverse-mode
//! autodiff tape, synthetic scene generation, a VQ-VAE depth codebook,
//! the interleaved token grammar, the training loss suite, a small
//! decoder-only model, and evaluation metrics.
//!
//! Everything here is deterministic given a seed: no platform RNG, no
//! hash-order dependence, fixed reduction order. The crate is `no_std`
//! (with `alloc`); float math goes through [`fmath`] so the same `libm`
//! code paths run under test builds and `no_std` builds alike.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod fmath;
pub mod rng;
pub mod tensor;
pub mod tape;
pub mod optim;
pub mod fdcheck;
pub mod grammar;
pub mod scene;
pub mod codebook;
pub mod losses;
pub mod model;
pub mod train;
pub mod eval;

pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
