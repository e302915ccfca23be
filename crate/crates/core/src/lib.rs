//! Embedding-only editing of CLIP-style text encoders.
//!
//! An edit rewrites only the word-token-embedding (WTE) rows of a target word
//! so that a source prompt's last hidden states approach those of a
//! destination prompt. Every other parameter stays bitwise unchanged, so any
//! prompt that avoids the edited tokens encodes exactly as before.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bias;
pub mod editor;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod probe;
pub mod tape;
pub mod tensor;

pub use encoder::{Encoder, EncoderConfig, EncoderWeights, HiddenStates, TokenSequence, Vocab};
pub use error::{EmbeditError, Result};
pub use tensor::Tensor;
