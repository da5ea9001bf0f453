//! Selective-encoding sequence-to-sequence summarization, built from a small
//! dense numeric kernel up to training, beam decoding, ROUGE scoring and gate
//! saliency.

#![allow(clippy::unnecessary_cast)]

pub mod decode;
pub mod io;
pub mod model;
pub mod rouge;
pub mod saliency;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;
