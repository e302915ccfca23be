use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::editor::{EditRequest, EditResult};
use crate::encoder::EncoderWeights;
use crate::error::{EmbeditError, Result};

/// One applied edit: which rows changed, from what, to what.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    #[serde(flatten)]
    pub request: EditRequest,
    pub edited_token_ids: Vec<u32>,
    pub original_rows: Vec<Vec<f64>>,
    pub new_rows: Vec<Vec<f64>>,
    pub result: EditResult,
}

/// Ordered record of edits applied to one encoder.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditLedger {
    pub entries: Vec<LedgerEntry>,
}

impl EditLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    /// Union of every edited token id, sorted.
    pub fn edited_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .entries
            .iter()
            .flat_map(|e| e.edited_token_ids.iter().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Writes every entry's new rows in order.
    pub fn replay(&self, weights: &mut EncoderWeights) -> Result<()> {
        for e in &self.entries {
            for (id, row) in e.edited_token_ids.iter().zip(&e.new_rows) {
                weights.set_wte_row(*id, row)?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut ledger: EditLedger = serde_json::from_str(text)?;
        for (i, e) in ledger.entries.iter_mut().enumerate() {
            if e.original_rows.len() != e.edited_token_ids.len() || e.new_rows.len() != e.edited_token_ids.len() {
                return Err(EmbeditError::Dataset(format!(
                    "ledger entry {i}: row count does not match edited_token_ids"
                )));
            }
            e.result.edited_token_ids = e.edited_token_ids.clone();
        }
        Ok(ledger)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Undoes the last `n_last` entries, newest first, and removes them from the ledger.
pub fn revert(weights: &mut EncoderWeights, ledger: &mut EditLedger, n_last: usize) -> Result<()> {
    if n_last > ledger.len() {
        return Err(EmbeditError::Range(format!(
            "cannot revert {n_last} edits, ledger holds {}",
            ledger.len()
        )));
    }
    for _ in 0..n_last {
        let entry = ledger.entries.pop().expect("checked length");
        for (id, row) in entry.edited_token_ids.iter().zip(&entry.original_rows) {
            weights.set_wte_row(*id, row)?;
        }
    }
    Ok(())
}
