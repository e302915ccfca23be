use std::collections::{BTreeMap, BTreeSet};

use crate::encoder::{EncoderConfig, EncoderWeights, LayerWeights, TokenSequence};
use crate::error::{EmbeditError, Result};
use crate::ops::MASK_VALUE;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Last hidden states plus the EOS-pooled row.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub sequence: Tensor,
    pub pooled: Tensor,
    pub eos_position: usize,
}

impl HiddenStates {
    pub fn bitwise_eq(&self, other: &HiddenStates) -> bool {
        self.eos_position == other.eos_position
            && self.sequence.bitwise_eq(&other.sequence)
            && self.pooled.bitwise_eq(&other.pooled)
    }
}

/// Result of a recorded forward pass.
pub struct TracedEncoding {
    pub hidden: HiddenStates,
    /// Tape node holding the `[context_length × d_model]` last hidden states.
    pub output: NodeId,
    /// One differentiable leaf per requested WTE row present in the sequence.
    pub row_leaves: BTreeMap<u32, NodeId>,
}

pub fn encode(tokens: &TokenSequence, weights: &EncoderWeights, config: &EncoderConfig) -> Result<HiddenStates> {
    let mut tape = Tape::new();
    Ok(encode_traced(&mut tape, tokens, weights, config, &BTreeSet::new())?.hidden)
}

/// Runs the encoder on `tape`, making the WTE rows listed in
/// `differentiable_rows` gradient leaves. Rows not in the sequence get no leaf.
pub fn encode_traced(
    tape: &mut Tape,
    tokens: &TokenSequence,
    weights: &EncoderWeights,
    config: &EncoderConfig,
    differentiable_rows: &BTreeSet<u32>,
) -> Result<TracedEncoding> {
    let ctx = config.context_length;
    if tokens.ids.len() != ctx || tokens.eos_position >= ctx {
        return Err(EmbeditError::dim("encode tokens", &[ctx], &[tokens.ids.len()]));
    }
    if weights.vocab_size() != config.vocab_size || weights.d_model() != config.d_model {
        return Err(EmbeditError::dim(
            "encode weights",
            &[config.vocab_size, config.d_model],
            weights.wte().shape(),
        ));
    }

    let mut row_leaves = BTreeMap::new();
    let mut rows = Vec::with_capacity(ctx);
    for &id in &tokens.ids {
        let row = Tensor::from_raw(vec![config.d_model], weights.wte_row(id)?.to_vec());
        let node = if differentiable_rows.contains(&id) {
            *row_leaves.entry(id).or_insert_with(|| tape.param(row))
        } else {
            tape.leaf(row)
        };
        rows.push(node);
    }
    let embedded = tape.stack_rows(&rows)?;
    let positional = tape.leaf(weights.positional.clone());
    let mut x = tape.add(embedded, positional)?;

    let mask = tape.leaf(causal_mask(ctx));
    for layer in &weights.layers {
        x = block(tape, x, layer, config, mask)?;
    }
    let gamma = tape.leaf(weights.final_gamma.clone());
    let beta = tape.leaf(weights.final_beta.clone());
    let output = tape.layer_norm(x, gamma, beta, config.eps)?;

    let sequence = tape.value(output)?.clone();
    let pooled = Tensor::from_raw(vec![config.d_model], sequence.row(tokens.eos_position).to_vec());
    Ok(TracedEncoding {
        hidden: HiddenStates {
            sequence,
            pooled,
            eos_position: tokens.eos_position,
        },
        output,
        row_leaves,
    })
}

fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = MASK_VALUE;
        }
    }
    Tensor::from_raw(vec![n, n], data)
}

fn linear(tape: &mut Tape, x: NodeId, w: &Tensor, b: &Tensor) -> Result<NodeId> {
    let w = tape.leaf(w.clone());
    let b = tape.leaf(b.clone());
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Pre-norm block: x + attn(ln1(x)), then + mlp(ln2(·)).
fn block(
    tape: &mut Tape,
    x: NodeId,
    layer: &LayerWeights,
    config: &EncoderConfig,
    mask: NodeId,
) -> Result<NodeId> {
    let g1 = tape.leaf(layer.ln1_gamma.clone());
    let b1 = tape.leaf(layer.ln1_beta.clone());
    let h = tape.layer_norm(x, g1, b1, config.eps)?;
    let q = linear(tape, h, &layer.wq, &layer.bq)?;
    let k = linear(tape, h, &layer.wk, &layer.bk)?;
    let v = linear(tape, h, &layer.wv, &layer.bv)?;

    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.n_heads);
    for head in 0..config.n_heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let scores = tape.add(scores, mask)?;
        let attn = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let attn_out = linear(tape, merged, &layer.wo, &layer.bo)?;
    let x = tape.add(x, attn_out)?;

    let g2 = tape.leaf(layer.ln2_gamma.clone());
    let b2 = tape.leaf(layer.ln2_beta.clone());
    let h = tape.layer_norm(x, g2, b2, config.eps)?;
    let f = linear(tape, h, &layer.w_fc, &layer.b_fc)?;
    let f = tape.gelu(f)?;
    let m = linear(tape, f, &layer.w_proj, &layer.b_proj)?;
    tape.add(x, m)
}
