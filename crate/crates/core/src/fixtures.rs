//! Small deterministic vocabularies and encoders for tests, examples and demos.

use std::collections::BTreeMap;

use crate::encoder::{Encoder, EncoderConfig, Vocab};

pub const FIXTURE_WORDS: &[&str] = &[
    "a", "the", "of", "with", "in", "photo", "painting", "zoo", "bear", "polar", "brown", "cat", "panda",
    "red", "bowl", "ice", "cream", "strawberry", "rose", "yellow", "banana", "apple", "doctor", "nurse", "ceo",
    "teacher", "female", "male", "woman", "man", "pedestal", "plinth", "marble", "dog", "black", "sky", "blue",
    "digital", "art", "portrait", "pine", "apple_",
];

/// The shared fixture vocabulary. `pineapple` splits into `pine` + `apple_`
/// and `ice cream` is two words.
pub fn fixture_vocab() -> Vocab {
    let mut splits = BTreeMap::new();
    splits.insert("pineapple".to_string(), vec!["pine".to_string(), "apple_".to_string()]);
    Vocab::from_words_with_splits(FIXTURE_WORDS, splits).expect("fixture vocab is valid")
}

/// The tiny encoder (d_model 8, 2 layers, 2 heads, context 8) over [`fixture_vocab`].
pub fn tiny_encoder(seed: u64) -> Encoder {
    Encoder::random(EncoderConfig::tiny(0), fixture_vocab(), seed).expect("tiny config is valid")
}

/// `n` synthetic words `w000`, `w001`, ...
pub fn synthetic_words(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i:03}")).collect()
}

pub fn synthetic_vocab(n: usize) -> Vocab {
    Vocab::from_words(&synthetic_words(n)).expect("synthetic words are unique")
}

/// Tiny encoder over a synthetic vocabulary of `n` words.
pub fn synthetic_encoder(n: usize, seed: u64) -> Encoder {
    Encoder::random(EncoderConfig::tiny(0), synthetic_vocab(n), seed).expect("tiny config is valid")
}
