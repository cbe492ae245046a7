//! Householder-flow variational autoencoder for one-shot style transfer.
//!
//! The crate is `no_std` (with `alloc`) and holds every numerical piece of the
//! system: a small reverse-mode tape, Householder flows and their three
//! vector-sourcing architectures, the reference encoder, the attention
//! sequence-to-sequence decoder, a synthetic style-annotated corpus, the
//! training loop, one-shot evaluation, and MUSHRA statistics.
//!
//! File formats, the command-line tool and experiment sweeps live in the
//! companion `hfvc` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod params;
pub mod seq2seq;
pub mod stats;
pub mod synthdata;
pub mod tape;
pub mod training;
pub mod vae;

pub use error::{Error, Result};
