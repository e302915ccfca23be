use serde::{Deserialize, Serialize};

use crate::error::{EmbeditError, Result};

/// Architecture hyperparameters of a CLIP-style text encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Filled in from the vocabulary when an encoder is initialized, so
    /// hand-written config files may omit it.
    #[serde(default)]
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_length: usize,
    pub eps: f64,
}

impl EncoderConfig {
    /// d_model=8, 2 layers, 2 heads, context 8.
    pub fn tiny(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            context_length: 8,
            eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EmbeditError::Config(m));
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} leaves no room for real tokens", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return fail("d_model, n_heads, d_ff and n_layers must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.context_length < 3 {
            return fail(format!("context_length {} < 3", self.context_length));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return fail(format!("eps must be finite and >= 0, got {}", self.eps));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Scalars in one WTE row, i.e. the cost of editing one token.
    pub fn params_per_wte_row(&self) -> usize {
        self.d_model
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        let per_layer = 2 * d            // ln1
            + 4 * (d * d + d)            // q, k, v, out projections
            + 2 * d                      // ln2
            + d * f + f                  // fc
            + f * d + d; // proj
        self.vocab_size * d + self.context_length * d + self.n_layers * per_layer + 2 * d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(EncoderConfig::tiny(20).validate().is_ok());
        let mut c = EncoderConfig::tiny(20);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(EmbeditError::Config(_))));
        let mut c = EncoderConfig::tiny(20);
        c.context_length = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_count_tiny() {
        // 20·8 + 8·8 + 2·(16 + 288 + 16 + 288 + 264) + 16
        assert_eq!(EncoderConfig::tiny(20).param_count(), 160 + 64 + 2 * 872 + 16);
    }
}
