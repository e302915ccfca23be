//! Gender-bias balancing of profession embeddings.
//!
//! Manual mode is a plain edit toward a counter-stereotypical prompt with a
//! per-profession stopping ratio. Auto mode starts the profession row(s) at
//! the mean of the profession, `female` and `male` rows, then minimizes
//! `alpha² · mse(p, csp) + alpha⁻² · mse(p, sp)` where `alpha` grows with the
//! measured bias rate.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::editor::{
    edit_single, flat_grad, mse_hidden, read_rows, restore_rows, target_token_ids, write_flat, EditHyperparams,
    EditLedger, EditRequest, EditResult, LedgerEntry, LossPositions,
};
use crate::encoder::{encode, encode_traced, Encoder, HiddenStates, TokenSequence};
use crate::error::{EmbeditError, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Gradient norm below which auto mode stops early.
pub const GRAD_NORM_STOP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceMode {
    Manual,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEditRequest {
    pub profession: String,
    /// "[stereotypical gender] [profession]"
    pub stereotypical_prompt: String,
    /// "[counter-stereotypical gender] [profession]"
    pub counter_prompt: String,
    pub mode: BalanceMode,
    #[serde(default)]
    pub lambda_manual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancerParams {
    pub alpha_min: f64,
    pub delta_normalizer: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub optimizer: OptimizerKind,
    pub loss_positions: LossPositions,
    pub female_word: String,
    pub male_word: String,
}

impl Default for BalancerParams {
    fn default() -> Self {
        BalancerParams {
            alpha_min: 2.0,
            delta_normalizer: 2.0,
            learning_rate: 1e-3,
            max_iters: 100,
            optimizer: OptimizerKind::Adam,
            loss_positions: LossPositions::FullSequence,
            female_word: "female".to_string(),
            male_word: "male".to_string(),
        }
    }
}

impl BalancerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_min >= 1.0 && self.alpha_min.is_finite()) {
            return Err(EmbeditError::Config(format!("alpha_min must be >= 1, got {}", self.alpha_min)));
        }
        if !(self.delta_normalizer > 0.0) {
            return Err(EmbeditError::Config("delta_normalizer must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) || self.max_iters == 0 {
            return Err(EmbeditError::Config("learning rate and max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of a balancing edit. `delta` and `alpha` are set in auto mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceOutcome {
    pub result: EditResult,
    pub delta: Option<f64>,
    pub alpha: Option<f64>,
}

/// Element-wise mean of the profession, female and male rows.
pub fn init_profession_embedding(profession: &Tensor, female: &Tensor, male: &Tensor) -> Result<Tensor> {
    if profession.shape() != female.shape() {
        return Err(EmbeditError::dim("init_profession_embedding", profession.shape(), female.shape()));
    }
    if profession.shape() != male.shape() {
        return Err(EmbeditError::dim("init_profession_embedding", profession.shape(), male.shape()));
    }
    let data = profession
        .data()
        .iter()
        .zip(female.data())
        .zip(male.data())
        .map(|((p, f), m)| (p + f + m) / 3.0)
        .collect();
    Tensor::new(profession.shape().to_vec(), data)
}

/// `|sp − csp| / (0.5 · (sp + csp)) / normalizer`; in `[0, 1]` for normalizer 2.
pub fn bias_rate_delta(mse_sp: f64, mse_csp: f64, normalizer: f64) -> Result<f64> {
    if mse_sp < 0.0 || mse_csp < 0.0 || !mse_sp.is_finite() || !mse_csp.is_finite() {
        return Err(EmbeditError::Range(format!(
            "MSE values must be finite and >= 0, got {mse_sp} and {mse_csp}"
        )));
    }
    if mse_sp == 0.0 && mse_csp == 0.0 {
        return Err(EmbeditError::Degenerate(
            "both MSEs are zero; the profession is already gender-neutral in representation".into(),
        ));
    }
    Ok((mse_sp - mse_csp).abs() / (0.5 * (mse_sp + mse_csp)) / normalizer)
}

pub fn alpha_weight(delta: f64, params: &BalancerParams) -> f64 {
    params.alpha_min.max(10.0 * delta)
}

fn loss_weights(alpha: f64) -> (f64, f64) {
    let inv = 1.0 / alpha;
    (alpha * alpha, inv * inv)
}

/// `alpha² · mse(h_p, h_csp) + (1/alpha)² · mse(h_p, h_sp)`.
pub fn balanced_loss(
    h_p: &HiddenStates,
    h_csp: &HiddenStates,
    h_sp: &HiddenStates,
    alpha: f64,
    positions: LossPositions,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(EmbeditError::Range(format!("alpha must be > 0, got {alpha}")));
    }
    let (w_csp, w_sp) = loss_weights(alpha);
    Ok(w_csp * mse_hidden(h_p, h_csp, positions)? + w_sp * mse_hidden(h_p, h_sp, positions)?)
}

/// Mean WTE row of a (possibly multi-token) word.
fn word_row(encoder: &Encoder, word: &str) -> Result<Tensor> {
    let ids = encoder.vocab.text_ids(word)?;
    let d = encoder.config.d_model;
    let mut acc = vec![0.0; d];
    for &id in &ids {
        for (a, v) in acc.iter_mut().zip(encoder.weights.wte_row(id)?) {
            *a += v;
        }
    }
    let n = ids.len() as f64;
    Tensor::vector(acc.into_iter().map(|v| v / n).collect())
}

/// Frozen target for the balanced loss: hidden states and the row count scored.
struct Target<'a> {
    hidden: &'a HiddenStates,
    rows: usize,
}

/// Balanced loss and its gradient with respect to `ids`, via the tape.
fn traced_balanced_loss(
    encoder: &Encoder,
    p: &TokenSequence,
    csp: &Target<'_>,
    sp: &Target<'_>,
    alpha: f64,
    ids: &[u32],
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let set: BTreeSet<u32> = ids.iter().copied().collect();
    let traced = encode_traced(&mut tape, p, &encoder.weights, &encoder.config, &set)?;
    let (w_csp, w_sp) = loss_weights(alpha);
    let m_csp = tape.mse_const(traced.output, &csp.hidden.sequence, csp.rows)?;
    let m_sp = tape.mse_const(traced.output, &sp.hidden.sequence, sp.rows)?;
    let a = tape.scale(m_csp, w_csp)?;
    let b = tape.scale(m_sp, w_sp)?;
    let loss = tape.add(a, b)?;
    let value = tape.value(loss)?.data()[0];
    let grads = tape.backward(loss)?;
    let leaves: Vec<_> = ids.iter().map(|id| (*id, traced.row_leaves.get(id).copied())).collect();
    Ok((value, flat_grad(&grads, &leaves, encoder.config.d_model)))
}

/// Balances one profession. Manual mode delegates to [`edit_single`]; auto
/// mode reports `threshold_tau = 0` since its loss has no stopping ratio.
pub fn edit_balance(
    encoder: &mut Encoder,
    request: &BiasEditRequest,
    params: &BalancerParams,
    ledger: &mut EditLedger,
) -> Result<BalanceOutcome> {
    params.validate()?;
    let edit = EditRequest::new(&request.profession, &request.counter_prompt, &request.profession);
    let ids = target_token_ids(&edit, &encoder.vocab)?;
    for prompt in [&request.stereotypical_prompt, &request.counter_prompt] {
        let present = encoder.vocab.id_set(prompt)?;
        if !ids.iter().all(|id| present.contains(id)) {
            return Err(EmbeditError::InconsistentRequest(format!(
                "profession {:?} does not occur in {prompt:?}",
                request.profession
            )));
        }
    }

    match request.mode {
        BalanceMode::Manual => {
            let lambda = request.lambda_manual.ok_or_else(|| {
                EmbeditError::Config(format!("manual mode for {:?} needs lambda_manual", request.profession))
            })?;
            let hyper = EditHyperparams {
                lambda,
                max_iters: params.max_iters,
                learning_rate: params.learning_rate,
                optimizer: params.optimizer,
                loss_positions: params.loss_positions,
            };
            let result = edit_single(encoder, &edit, &hyper, ledger)?;
            Ok(BalanceOutcome {
                result,
                delta: None,
                alpha: None,
            })
        }
        BalanceMode::Auto => {
            let original_rows = read_rows(&encoder.weights, &ids)?;
            match auto_balance(encoder, request, params, &ids) {
                Ok((result, delta, alpha)) => {
                    ledger.push(LedgerEntry {
                        request: edit,
                        edited_token_ids: ids.clone(),
                        new_rows: read_rows(&encoder.weights, &ids)?,
                        original_rows,
                        result: result.clone(),
                    });
                    Ok(BalanceOutcome {
                        result,
                        delta,
                        alpha: Some(alpha),
                    })
                }
                Err(e) => {
                    restore_rows(&mut encoder.weights, &ids, &original_rows);
                    Err(e)
                }
            }
        }
    }
}

fn auto_balance(
    encoder: &mut Encoder,
    request: &BiasEditRequest,
    params: &BalancerParams,
    ids: &[u32],
) -> Result<(EditResult, Option<f64>, f64)> {
    let cfg = encoder.config.clone();
    let p = encoder.tokenize(&request.profession)?;
    let sp_tokens = encoder.tokenize(&request.stereotypical_prompt)?;
    let csp_tokens = encoder.tokenize(&request.counter_prompt)?;
    // Targets are frozen from the weights as they were before the edit.
    let h_sp = encode(&sp_tokens, &encoder.weights, &cfg)?;
    let h_csp = encode(&csp_tokens, &encoder.weights, &cfg)?;
    let positions = params.loss_positions;
    let sp = Target {
        hidden: &h_sp,
        rows: positions.rows(p.eos_position, sp_tokens.eos_position, cfg.context_length),
    };
    let csp = Target {
        hidden: &h_csp,
        rows: positions.rows(p.eos_position, csp_tokens.eos_position, cfg.context_length),
    };

    let female = word_row(encoder, &params.female_word)?;
    let male = word_row(encoder, &params.male_word)?;
    for &id in ids {
        let row = Tensor::vector(encoder.weights.wte_row(id)?.to_vec())?;
        let init = init_profession_embedding(&row, &female, &male)?;
        encoder.weights.set_wte_row(id, init.data())?;
    }

    let h_p = encode(&p, &encoder.weights, &cfg)?;
    let mse_sp = mse_hidden(&h_p, &h_sp, positions)?;
    let mse_csp = mse_hidden(&h_p, &h_csp, positions)?;
    let (delta, alpha) = match bias_rate_delta(mse_sp, mse_csp, params.delta_normalizer) {
        Ok(delta) => (Some(delta), alpha_weight(delta, params)),
        Err(EmbeditError::Degenerate(msg)) => {
            log::warn!("{}: {msg}; using alpha_min", request.profession);
            (None, params.alpha_min)
        }
        Err(e) => return Err(e),
    };

    let mut flat = read_rows(&encoder.weights, ids)?.concat();
    let mut optimizer = Optimizer::new(params.optimizer, params.learning_rate, flat.len());
    let mut initial_loss = None;
    let mut iterations_run = 0;
    let mut optimizer_steps = 0;
    for i in 1..=params.max_iters {
        iterations_run = i;
        let (loss, grad) = traced_balanced_loss(encoder, &p, &csp, &sp, alpha, ids)?;
        if !loss.is_finite() {
            return Err(EmbeditError::Divergence { iteration: i });
        }
        initial_loss.get_or_insert(loss);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < GRAD_NORM_STOP {
            break;
        }
        optimizer.step(&mut flat, &grad);
        write_flat(&mut encoder.weights, ids, &flat, i)?;
        optimizer_steps += 1;
    }
    let h_final = encode(&p, &encoder.weights, &cfg)?;
    let final_loss = balanced_loss(&h_final, &h_csp, &h_sp, alpha, positions)?;
    if !final_loss.is_finite() {
        return Err(EmbeditError::Divergence {
            iteration: iterations_run,
        });
    }
    let result = EditResult {
        initial_loss: initial_loss.expect("max_iters >= 1"),
        threshold_tau: 0.0,
        final_loss,
        iterations_run,
        optimizer_steps,
        converged: final_loss <= 0.0,
        edited_token_ids: ids.to_vec(),
    };
    Ok((result, delta, alpha))
}
