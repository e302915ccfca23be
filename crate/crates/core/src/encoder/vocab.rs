//! Closed-vocabulary tokenizer with an explicit word → subword split table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{EmbeditError, Result};

pub const BOS_TOKEN: &str = "<|startoftext|>";
pub const EOS_TOKEN: &str = "<|endoftext|>";
pub const PAD_TOKEN: &str = "<|pad|>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: BTreeMap<String, u32>,
    splits: BTreeMap<String, Vec<String>>,
    bos: u32,
    eos: u32,
    pad: u32,
    by_id: Vec<String>,
}

/// On-disk vocabulary layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabFile {
    pub tokens: BTreeMap<String, u32>,
    #[serde(default)]
    pub splits: BTreeMap<String, Vec<String>>,
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

impl TryFrom<VocabFile> for Vocab {
    type Error = EmbeditError;

    fn try_from(f: VocabFile) -> Result<Self> {
        Vocab::new(f.tokens, f.splits, f.bos, f.eos, f.pad)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile {
            tokens: v.tokens,
            splits: v.splits,
            bos: v.bos,
            eos: v.eos,
            pad: v.pad,
        }
    }
}

impl Vocab {
    pub fn new(
        tokens: BTreeMap<String, u32>,
        splits: BTreeMap<String, Vec<String>>,
        bos: u32,
        eos: u32,
        pad: u32,
    ) -> Result<Self> {
        let n = tokens.len();
        let mut by_id = vec![None; n];
        for (tok, &id) in &tokens {
            let slot = by_id
                .get_mut(id as usize)
                .ok_or_else(|| EmbeditError::Vocab(format!("id {id} of {tok:?} not in [0, {n})")))?;
            if slot.is_some() {
                return Err(EmbeditError::Vocab(format!("id {id} assigned twice")));
            }
            *slot = Some(tok.clone());
        }
        let by_id: Vec<String> = by_id.into_iter().map(|t| t.expect("dense ids")).collect();
        for id in [bos, eos, pad] {
            if id as usize >= n {
                return Err(EmbeditError::Vocab(format!("special id {id} out of range")));
            }
        }
        if bos == eos || bos == pad || eos == pad {
            return Err(EmbeditError::Vocab("BOS, EOS and PAD must be distinct".into()));
        }
        for (word, subs) in &splits {
            if subs.is_empty() {
                return Err(EmbeditError::Vocab(format!("split for {word:?} is empty")));
            }
            for s in subs {
                match tokens.get(s) {
                    None => {
                        return Err(EmbeditError::Vocab(format!(
                            "split for {word:?} uses unknown subword {s:?}"
                        )))
                    }
                    Some(&id) if id == bos || id == eos || id == pad => {
                        return Err(EmbeditError::Vocab(format!(
                            "split for {word:?} uses a special token"
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(Vocab {
            tokens,
            splits,
            bos,
            eos,
            pad,
            by_id,
        })
    }

    /// Specials take ids 0, 1, 2; `words` follow in order.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        Self::from_words_with_splits(words, BTreeMap::new())
    }

    pub fn from_words_with_splits<S: AsRef<str>>(
        words: &[S],
        splits: BTreeMap<String, Vec<String>>,
    ) -> Result<Self> {
        let mut tokens = BTreeMap::new();
        for (i, t) in [BOS_TOKEN, EOS_TOKEN, PAD_TOKEN].iter().enumerate() {
            tokens.insert(t.to_string(), i as u32);
        }
        for w in words {
            let id = tokens.len() as u32;
            if tokens.insert(w.as_ref().to_string(), id).is_some() {
                return Err(EmbeditError::Vocab(format!("duplicate token {:?}", w.as_ref())));
            }
        }
        Vocab::new(tokens, splits, 0, 1, 2)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn bos(&self) -> u32 {
        self.bos
    }

    pub fn eos(&self) -> u32 {
        self.eos
    }

    pub fn pad(&self) -> u32 {
        self.pad
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.bos || id == self.eos || id == self.pad
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.by_id.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.tokens.get(token).copied()
    }

    pub fn splits(&self) -> &BTreeMap<String, Vec<String>> {
        &self.splits
    }

    /// Ids that are neither BOS, EOS nor PAD.
    pub fn content_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.len() as u32).filter(|&id| !self.is_special(id))
    }

    /// Token ids of a single (already lowercased) word.
    pub fn word_ids(&self, word: &str) -> Result<Vec<u32>> {
        let unknown = || EmbeditError::UnknownToken {
            word: word.to_string(),
        };
        if let Some(subs) = self.splits.get(word) {
            return Ok(subs.iter().map(|s| self.tokens[s]).collect());
        }
        match self.tokens.get(word) {
            Some(&id) if !self.is_special(id) => Ok(vec![id]),
            _ => Err(unknown()),
        }
    }

    /// Ids of every word of `text` after lowercasing and whitespace splitting.
    pub fn text_ids(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for word in normalize(text) {
            ids.extend(self.word_ids(&word)?);
        }
        Ok(ids)
    }

    pub fn id_set(&self, text: &str) -> Result<BTreeSet<u32>> {
        Ok(self.text_ids(text)?.into_iter().collect())
    }
}

/// Lowercased whitespace-separated words.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// A padded, BOS/EOS-wrapped token id sequence of exactly `context_length` ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub eos_position: usize,
}

impl TokenSequence {
    /// Ids strictly between BOS and EOS.
    pub fn content(&self) -> &[u32] {
        &self.ids[1..self.eos_position]
    }
}

pub fn tokenize(prompt: &str, vocab: &Vocab, config: &EncoderConfig) -> Result<TokenSequence> {
    let words = normalize(prompt);
    if words.is_empty() {
        return Err(EmbeditError::EmptyPrompt);
    }
    let mut ids = vec![vocab.bos()];
    for w in &words {
        ids.extend(vocab.word_ids(w)?);
    }
    let needed = ids.len() + 1;
    if needed > config.context_length {
        return Err(EmbeditError::Overflow {
            needed,
            context_length: config.context_length,
        });
    }
    let eos_position = ids.len();
    ids.push(vocab.eos());
    ids.resize(config.context_length, vocab.pad());
    Ok(TokenSequence { ids, eos_position })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vocab, EncoderConfig) {
        // a→5, bear→9, polar→12 as in the documented fixture.
        let mut tokens = BTreeMap::new();
        for (t, id) in [
            (BOS_TOKEN, 0),
            (EOS_TOKEN, 1),
            (PAD_TOKEN, 2),
            ("the", 3),
            ("of", 4),
            ("a", 5),
            ("zoo", 6),
            ("ice", 7),
            ("cream", 8),
            ("bear", 9),
            ("cat", 10),
            ("with", 11),
            ("pol", 12),
            ("ar", 13),
        ] {
            tokens.insert(t.to_string(), id);
        }
        let mut splits = BTreeMap::new();
        splits.insert("polar".to_string(), vec!["pol".to_string()]);
        splits.insert("polarity".to_string(), vec!["pol".to_string(), "ar".to_string()]);
        let v = Vocab::new(tokens, splits, 0, 1, 2).unwrap();
        (v, EncoderConfig::tiny(14))
    }

    #[test]
    fn tokenizes_fixture_prompts() {
        let (v, c) = fixture();
        let t = tokenize("a bear", &v, &c).unwrap();
        assert_eq!(t.ids, vec![0, 5, 9, 1, 2, 2, 2, 2]);
        assert_eq!(t.eos_position, 3);

        let t = tokenize("  Polar   BEAR ", &v, &c).unwrap();
        assert_eq!(t.ids[..4], [0, 12, 9, 1]);

        let t = tokenize("polarity", &v, &c).unwrap();
        assert_eq!(t.content(), &[12, 13]);
    }

    #[test]
    fn tokenizer_errors() {
        let (v, c) = fixture();
        assert!(matches!(
            tokenize("quixotic", &v, &c),
            Err(EmbeditError::UnknownToken { word }) if word == "quixotic"
        ));
        assert!(matches!(tokenize("   ", &v, &c), Err(EmbeditError::EmptyPrompt)));
        assert!(matches!(
            tokenize("a bear a bear a bear a", &v, &c),
            Err(EmbeditError::Overflow { needed: 9, .. })
        ));
        // Exactly full context is fine.
        assert!(tokenize("a bear a bear a bear", &v, &c).is_ok());
        assert!(matches!(
            tokenize(EOS_TOKEN, &v, &c),
            Err(EmbeditError::UnknownToken { .. })
        ));
    }

    #[test]
    fn rejects_bad_vocabularies() {
        let mut tokens = BTreeMap::new();
        tokens.insert("a".to_string(), 0);
        tokens.insert("b".to_string(), 2);
        assert!(Vocab::new(tokens.clone(), BTreeMap::new(), 0, 1, 2).is_err());
        tokens.insert("c".to_string(), 1);
        assert!(Vocab::new(tokens.clone(), BTreeMap::new(), 0, 0, 2).is_err());
        let mut splits = BTreeMap::new();
        splits.insert("x".to_string(), vec!["zz".to_string()]);
        assert!(Vocab::new(tokens, splits, 0, 1, 2).is_err());
    }

    #[test]
    fn json_round_trip() {
        let (v, _) = fixture();
        let text = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&text).unwrap();
        assert_eq!(v, back);
        assert!(text.contains("\"splits\""));
    }
}
