//! CLIP-style text encoder: tokenizer, pre-norm causal transformer, archive I/O.

mod archive;
mod config;
mod forward;
mod vocab;
mod weights;

use std::path::Path;

pub use archive::{from_bytes, load_weights, save_weights, to_bytes, ArchiveHeader, TensorEntry, MAGIC};
pub use config::EncoderConfig;
pub use forward::{encode, encode_traced, HiddenStates, TracedEncoding};
pub use vocab::{normalize, tokenize, TokenSequence, Vocab, VocabFile, BOS_TOKEN, EOS_TOKEN, PAD_TOKEN};
pub use weights::{tensor_layout, EncoderWeights, LayerWeights, INIT_STD};

use crate::error::{EmbeditError, Result};

/// Config, weights and vocabulary of one encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub weights: EncoderWeights,
    pub vocab: Vocab,
}

impl Encoder {
    pub fn new(config: EncoderConfig, weights: EncoderWeights, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(EmbeditError::Config(format!(
                "vocab has {} tokens but config.vocab_size is {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        if weights.vocab_size() != config.vocab_size || weights.d_model() != config.d_model {
            return Err(EmbeditError::dim(
                "encoder weights",
                &[config.vocab_size, config.d_model],
                weights.wte().shape(),
            ));
        }
        Ok(Encoder { config, weights, vocab })
    }

    /// Randomly initialized encoder; `config.vocab_size` is taken from `vocab`.
    pub fn random(mut config: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        let weights = EncoderWeights::init_random(&config, seed)?;
        Encoder::new(config, weights, vocab)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (c, w, v) = load_weights(path)?;
        Encoder::new(c, w, v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_weights(path, &self.config, &self.weights, &self.vocab)
    }

    pub fn tokenize(&self, prompt: &str) -> Result<TokenSequence> {
        tokenize(prompt, &self.vocab, &self.config)
    }

    pub fn encode_prompt(&self, prompt: &str) -> Result<HiddenStates> {
        encode(&self.tokenize(prompt)?, &self.weights, &self.config)
    }
}
