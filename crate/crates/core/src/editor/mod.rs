//! Embedding-only editing.
//!
//! An edit precomputes the destination prompt's last hidden states once, sets
//! the stopping threshold `tau = lambda * initial_loss`, then alternates
//! "encode source, check loss against tau, step" until the check passes or the
//! iteration cap is reached. Only the target word's WTE rows are optimized.

mod budget;
mod ledger;

use std::collections::BTreeSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use budget::{param_budget_report, BudgetReport, EditBudget};
pub use ledger::{revert, EditLedger, LedgerEntry};

use crate::encoder::{encode, encode_traced, normalize, Encoder, EncoderWeights, HiddenStates, TokenSequence, Vocab};
use crate::error::{EmbeditError, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::mean_squared_diff;

/// Which hidden-state rows enter the MSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossPositions {
    /// Every one of the `context_length` rows, padding included.
    #[default]
    FullSequence,
    /// Rows `0..=max(eos_a, eos_b)`.
    UpToEos,
}

impl FromStr for LossPositions {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full_sequence" | "full" => Ok(LossPositions::FullSequence),
            "up_to_eos" | "eos" => Ok(LossPositions::UpToEos),
            other => Err(format!("unknown loss positions {other:?} (expected full_sequence or up_to_eos)")),
        }
    }
}

impl LossPositions {
    pub fn rows(self, eos_a: usize, eos_b: usize, context_length: usize) -> usize {
        match self {
            LossPositions::FullSequence => context_length,
            LossPositions::UpToEos => eos_a.max(eos_b) + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub source_prompt: String,
    pub destination_prompt: String,
    pub target_word: String,
}

impl EditRequest {
    pub fn new(source: &str, destination: &str, target: &str) -> Self {
        EditRequest {
            source_prompt: source.to_string(),
            destination_prompt: destination.to_string(),
            target_word: target.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditHyperparams {
    pub lambda: f64,
    pub max_iters: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss_positions: LossPositions,
}

impl Default for EditHyperparams {
    fn default() -> Self {
        EditHyperparams {
            lambda: 0.2,
            max_iters: 100,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            loss_positions: LossPositions::FullSequence,
        }
    }
}

impl EditHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(EmbeditError::Config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if self.max_iters == 0 {
            return Err(EmbeditError::Config("max_iters must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EmbeditError::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub initial_loss: f64,
    #[serde(rename = "tau")]
    pub threshold_tau: f64,
    /// Loss at the weights the edit leaves behind.
    pub final_loss: f64,
    pub iterations_run: usize,
    pub optimizer_steps: usize,
    pub converged: bool,
    #[serde(skip)]
    pub edited_token_ids: Vec<u32>,
}

/// Mean squared difference of two hidden-state matrices over the selected rows.
pub fn mse_hidden(a: &HiddenStates, b: &HiddenStates, positions: LossPositions) -> Result<f64> {
    if a.sequence.shape() != b.sequence.shape() {
        return Err(EmbeditError::dim("mse_hidden", a.sequence.shape(), b.sequence.shape()));
    }
    let rows = positions
        .rows(a.eos_position, b.eos_position, a.sequence.rows())
        .min(a.sequence.rows());
    let n = rows * a.sequence.last_dim();
    Ok(mean_squared_diff(&a.sequence.data()[..n], &b.sequence.data()[..n]))
}

/// Token ids of `request.target_word`, each of which must occur in the source prompt.
pub fn target_token_ids(request: &EditRequest, vocab: &Vocab) -> Result<Vec<u32>> {
    if normalize(&request.target_word).is_empty() {
        return Err(EmbeditError::InconsistentRequest("empty target word".into()));
    }
    let ids = vocab.id_set(&request.target_word)?;
    let source = vocab.id_set(&request.source_prompt)?;
    if let Some(missing) = ids.iter().find(|id| !source.contains(id)) {
        return Err(EmbeditError::InconsistentRequest(format!(
            "target {:?} token {:?} does not occur in source prompt {:?}",
            request.target_word,
            vocab.token(*missing).unwrap_or("?"),
            request.source_prompt
        )));
    }
    Ok(ids.into_iter().collect())
}

pub(crate) fn read_rows(weights: &EncoderWeights, ids: &[u32]) -> Result<Vec<Vec<f64>>> {
    ids.iter().map(|&id| Ok(weights.wte_row(id)?.to_vec())).collect()
}

pub(crate) fn write_flat(weights: &mut EncoderWeights, ids: &[u32], flat: &[f64], iteration: usize) -> Result<()> {
    let d = weights.d_model();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(EmbeditError::Divergence { iteration });
    }
    for (k, &id) in ids.iter().enumerate() {
        weights.set_wte_row(id, &flat[k * d..(k + 1) * d])?;
    }
    Ok(())
}

pub(crate) fn restore_rows(weights: &mut EncoderWeights, ids: &[u32], rows: &[Vec<f64>]) {
    for (&id, row) in ids.iter().zip(rows) {
        weights.set_wte_row(id, row).expect("restoring a captured row");
    }
}

/// Concatenated gradients of the target rows. Ids with no leaf get zeros.
pub(crate) fn flat_grad(grads: &Gradients, leaves: &[(u32, Option<NodeId>)], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(leaves.len() * d);
    for (_, leaf) in leaves {
        match leaf.and_then(|l| grads.get(l)) {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(std::iter::repeat_n(0.0, d)),
        }
    }
    out
}

/// Loss value, its tape and node, and the leaf of each edited id.
pub(crate) type TracedLoss = (f64, Tape, NodeId, Vec<(u32, Option<NodeId>)>);

/// Loss of `source` against frozen `target` hidden states, plus its gradient
/// with respect to the rows `ids`.
pub(crate) fn loss_and_grad(
    encoder: &Encoder,
    source: &TokenSequence,
    target: &HiddenStates,
    rows: usize,
    ids: &[u32],
) -> Result<TracedLoss> {
    let mut tape = Tape::new();
    let set: BTreeSet<u32> = ids.iter().copied().collect();
    let traced = encode_traced(&mut tape, source, &encoder.weights, &encoder.config, &set)?;
    let loss = tape.mse_const(traced.output, &target.sequence, rows)?;
    let value = tape.value(loss)?.data()[0];
    let leaves = ids.iter().map(|id| (*id, traced.row_leaves.get(id).copied())).collect();
    Ok((value, tape, loss, leaves))
}

/// Optimizes the target word's WTE rows so the source prompt's last hidden
/// states approach the destination's. Appends one ledger entry on success.
/// On error the target rows are restored and the ledger is left untouched.
pub fn edit_single(
    encoder: &mut Encoder,
    request: &EditRequest,
    hyper: &EditHyperparams,
    ledger: &mut EditLedger,
) -> Result<EditResult> {
    hyper.validate()?;
    let ids = target_token_ids(request, &encoder.vocab)?;
    let source = encoder.tokenize(&request.source_prompt)?;
    let destination = encoder.tokenize(&request.destination_prompt)?;
    let rows = hyper
        .loss_positions
        .rows(source.eos_position, destination.eos_position, encoder.config.context_length);

    let h_new = encode(&destination, &encoder.weights, &encoder.config)?;
    let h_init = encode(&source, &encoder.weights, &encoder.config)?;
    let initial_loss = mse_hidden(&h_init, &h_new, hyper.loss_positions)?;
    if !initial_loss.is_finite() {
        return Err(EmbeditError::Divergence { iteration: 0 });
    }
    let tau = hyper.lambda * initial_loss;

    let original_rows = read_rows(&encoder.weights, &ids)?;
    let outcome = optimize(encoder, &source, &h_new, rows, &ids, hyper, tau);
    let (final_loss, iterations_run, optimizer_steps) = match outcome {
        Ok(v) => v,
        Err(e) => {
            restore_rows(&mut encoder.weights, &ids, &original_rows);
            return Err(e);
        }
    };

    let result = EditResult {
        initial_loss,
        threshold_tau: tau,
        final_loss,
        iterations_run,
        optimizer_steps,
        converged: final_loss <= tau,
        edited_token_ids: ids.clone(),
    };
    ledger.push(LedgerEntry {
        request: request.clone(),
        edited_token_ids: ids.clone(),
        new_rows: read_rows(&encoder.weights, &ids)?,
        original_rows,
        result: result.clone(),
    });
    log::debug!(
        "edit {:?}: loss {:.6e} -> {:.6e} in {} steps",
        request.target_word,
        initial_loss,
        final_loss,
        optimizer_steps
    );
    Ok(result)
}

/// Check-then-step loop. Returns (final loss, iterations run, optimizer steps).
fn optimize(
    encoder: &mut Encoder,
    source: &TokenSequence,
    h_new: &HiddenStates,
    rows: usize,
    ids: &[u32],
    hyper: &EditHyperparams,
    tau: f64,
) -> Result<(f64, usize, usize)> {
    let d = encoder.config.d_model;
    let mut params: Vec<f64> = read_rows(&encoder.weights, ids)?.concat();
    let mut optimizer = Optimizer::new(hyper.optimizer, hyper.learning_rate, params.len());
    for i in 1..=hyper.max_iters {
        let (loss, tape, loss_node, leaves) = loss_and_grad(encoder, source, h_new, rows, ids)?;
        if !loss.is_finite() {
            return Err(EmbeditError::Divergence { iteration: i });
        }
        if loss <= tau {
            return Ok((loss, i, i - 1));
        }
        let grads = tape.backward(loss_node)?;
        optimizer.step(&mut params, &flat_grad(&grads, &leaves, d));
        write_flat(&mut encoder.weights, ids, &params, i)?;
    }
    let h = encode(source, &encoder.weights, &encoder.config)?;
    let final_loss = mean_squared_diff(
        &h.sequence.data()[..rows * d],
        &h_new.sequence.data()[..rows * d],
    );
    if !final_loss.is_finite() {
        return Err(EmbeditError::Divergence {
            iteration: hyper.max_iters,
        });
    }
    Ok((final_loss, hyper.max_iters, hyper.max_iters))
}

/// Applies edits in order to the same encoder. Stops at the first failure;
/// entries already completed stay in the ledger.
pub fn edit_sequential(
    encoder: &mut Encoder,
    requests: &[EditRequest],
    hyper: &EditHyperparams,
    ledger: &mut EditLedger,
) -> Result<Vec<EditResult>> {
    requests
        .iter()
        .map(|r| edit_single(encoder, r, hyper, ledger))
        .collect()
}

/// Runs the same edit independently on every encoder (e.g. the two text
/// encoders of a dual-encoder model). The request is validated against all
/// vocabularies before any weights change.
pub fn edit_multi_encoder(
    encoders: &mut [Encoder],
    ledgers: &mut [EditLedger],
    request: &EditRequest,
    hyper: &EditHyperparams,
) -> Result<Vec<EditResult>> {
    if encoders.len() != ledgers.len() {
        return Err(EmbeditError::Usage(format!(
            "{} encoders but {} ledgers",
            encoders.len(),
            ledgers.len()
        )));
    }
    for (index, e) in encoders.iter().enumerate() {
        target_token_ids(request, &e.vocab).map_err(|source| EmbeditError::Encoder {
            index,
            source: Box::new(source),
        })?;
    }
    encoders
        .iter_mut()
        .zip(ledgers.iter_mut())
        .enumerate()
        .map(|(index, (e, l))| {
            edit_single(e, request, hyper, l).map_err(|source| EmbeditError::Encoder {
                index,
                source: Box::new(source),
            })
        })
        .collect()
}
