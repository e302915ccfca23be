//! Single-file weight archive.
//!
//! Layout: 8-byte magic `EMBEDIT1`, a little-endian `u64` header length, a
//! JSON header `{config, vocab, tensors: [{name, shape, dtype, offset, nbytes}]}`,
//! then raw little-endian `f64` payloads. Tensor offsets are relative to the
//! first byte after the header.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderWeights, Vocab};
use crate::error::{EmbeditError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EMBEDIT1";
const PREFIX_LEN: u64 = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(config: &EncoderConfig, weights: &EncoderWeights, vocab: &Vocab) -> Result<Vec<u8>> {
    config.validate()?;
    if vocab.len() != config.vocab_size {
        return Err(EmbeditError::Config(format!(
            "vocab has {} tokens but config.vocab_size is {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for (name, t) in weights.named_tensors() {
        let nbytes = (t.numel() * 8) as u64;
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f64".to_string(),
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let header = ArchiveHeader {
        config: config.clone(),
        vocab: vocab.clone(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN as usize + header_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in weights.named_tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(EncoderConfig, EncoderWeights, Vocab)> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(EmbeditError::format(0, "missing EMBEDIT1 magic"));
    }
    if bytes.len() < PREFIX_LEN as usize {
        return Err(EmbeditError::format(8, "truncated header length"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload_start = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            EmbeditError::format(8, format!("header length {header_len} exceeds file size {}", bytes.len()))
        })?;
    let header: ArchiveHeader = serde_json::from_slice(&bytes[PREFIX_LEN as usize..payload_start as usize])
        .map_err(|e| EmbeditError::format(PREFIX_LEN, format!("bad header JSON: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| EmbeditError::format(PREFIX_LEN, e.to_string()))?;
    if header.vocab.len() != header.config.vocab_size {
        return Err(EmbeditError::format(
            PREFIX_LEN,
            format!(
                "vocab has {} tokens but config.vocab_size is {}",
                header.vocab.len(),
                header.config.vocab_size
            ),
        ));
    }

    let payload = &bytes[payload_start as usize..];
    let mut named = BTreeMap::new();
    for entry in &header.tensors {
        let at = payload_start + entry.offset;
        if entry.dtype != "f64" {
            return Err(EmbeditError::format(at, format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.nbytes != (numel * 8) as u64 {
            return Err(EmbeditError::format(
                at,
                format!("{}: shape {:?} needs {} bytes, header says {}", entry.name, entry.shape, numel * 8, entry.nbytes),
            ));
        }
        let end = entry.offset.saturating_add(entry.nbytes);
        if end > payload.len() as u64 {
            return Err(EmbeditError::format(
                bytes.len() as u64,
                format!("{}: payload truncated (needs up to byte {})", entry.name, payload_start + end),
            ));
        }
        let raw = &payload[entry.offset as usize..end as usize];
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| EmbeditError::format(at, format!("{}: {e}", entry.name)))?;
        if named.insert(entry.name.clone(), t).is_some() {
            return Err(EmbeditError::format(at, format!("duplicate tensor {}", entry.name)));
        }
    }
    let weights = EncoderWeights::from_named(&header.config, named)
        .map_err(|e| EmbeditError::format(PREFIX_LEN, e.to_string()))?;
    Ok((header.config, weights, header.vocab))
}

pub fn save_weights(
    path: impl AsRef<Path>,
    config: &EncoderConfig,
    weights: &EncoderWeights,
    vocab: &Vocab,
) -> Result<()> {
    std::fs::write(path, to_bytes(config, weights, vocab)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(EncoderConfig, EncoderWeights, Vocab)> {
    from_bytes(&std::fs::read(path)?)
}
