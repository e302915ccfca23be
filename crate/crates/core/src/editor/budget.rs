//! Parameter and FLOP accounting for applied edits.

use serde::{Deserialize, Serialize};

use crate::editor::EditLedger;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditBudget {
    pub target_word: String,
    pub modified_scalars: usize,
    /// One multiply-add per modified scalar per update.
    pub update_flops: usize,
    pub ratio: f64,
}

impl EditBudget {
    pub fn new(target_word: &str, n_tokens: usize, d_model: usize, total_model_params: usize) -> Self {
        let modified_scalars = n_tokens * d_model;
        EditBudget {
            target_word: target_word.to_string(),
            modified_scalars,
            update_flops: 2 * modified_scalars,
            ratio: ratio(modified_scalars, total_model_params),
        }
    }

    /// Sums the budgets of one edit applied to several encoders of one model.
    pub fn combine(parts: &[EditBudget], total_model_params: usize) -> EditBudget {
        let modified_scalars = parts.iter().map(|p| p.modified_scalars).sum();
        EditBudget {
            target_word: parts.first().map(|p| p.target_word.clone()).unwrap_or_default(),
            modified_scalars,
            update_flops: parts.iter().map(|p| p.update_flops).sum(),
            ratio: ratio(modified_scalars, total_model_params),
        }
    }

    pub fn summary_line(&self) -> String {
        format!(
            "target={} modified={} flops={} ratio={:.3e}",
            self.target_word, self.modified_scalars, self.update_flops, self.ratio
        )
    }
}

fn ratio(scalars: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        scalars as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub per_edit: Vec<EditBudget>,
    pub total_model_params: usize,
    pub d_model: usize,
}

pub fn param_budget_report(ledger: &EditLedger, total_model_params: usize, d_model: usize) -> BudgetReport {
    let per_edit = ledger
        .entries
        .iter()
        .map(|e| EditBudget::new(&e.request.target_word, e.edited_token_ids.len(), d_model, total_model_params))
        .collect();
    BudgetReport {
        per_edit,
        total_model_params,
        d_model,
    }
}
