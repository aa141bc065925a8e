//! Speaker Transformer with multi-view (per-head sliding-window) self-attention.
//!
//! The crate is `no_std` + `alloc`. It carries everything that is pure
//! computation: a dense tensor type with a reverse-mode tape, the head-wise
//! window masks, masked multi-head attention, the encoder/decoder stacks, the
//! five speaker-embedding variants, the acoustic frontend, the optimizer and
//! training loop, and the identification/verification metrics. File formats,
//! WAV decoding and the command line live in the `mvsa` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod masks;
pub mod numerics;
pub mod training;
pub mod transformer;
pub mod variants;

pub use error::{Error, Result};
