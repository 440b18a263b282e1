//! Desk-scale unified streaming / non-streaming speech recognition lab.
//!
//! One Conformer-lite encoder and Transformer-lite decoder serve both a
//! streaming mode (chunk-restricted self-attention) and a full-context mode,
//! switched purely by the attention mask. Training combines per-branch
//! CTC and attention losses with an optional representation-bridging term
//! (frame-level contrastive or L2) that pulls the two modes' top-layer
//! encoder representations together. Inference is two-pass: CTC prefix beam
//! search followed by attention rescoring, with optional n-gram shallow
//! fusion. Everything runs on a synthetic template corpus small enough to
//! train and verify on a laptop CPU.

pub mod analysis;
pub mod data;
pub mod decoding;
mod error;
pub mod losses;
pub mod masking;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
