use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::EncoderConfig;
use crate::error::{EmbeditError, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ln2.gamma",
    "ln2.beta",
    "mlp.w_fc",
    "mlp.b_fc",
    "mlp.w_proj",
    "mlp.b_proj",
];

impl LayerWeights {
    fn fields(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_fc,
            &self.b_fc,
            &self.w_proj,
            &self.b_proj,
        ]
    }

    fn shapes(c: &EncoderConfig) -> [Vec<usize>; 16] {
        let (d, f) = (c.d_model, c.d_ff);
        [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ]
    }

    fn from_fields(mut t: Vec<Tensor>) -> Self {
        assert_eq!(t.len(), 16);
        let mut next = || t.remove(0);
        LayerWeights {
            ln1_gamma: next(),
            ln1_beta: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_gamma: next(),
            ln2_beta: next(),
            w_fc: next(),
            b_fc: next(),
            w_proj: next(),
            b_proj: next(),
        }
    }
}

/// Every parameter of the encoder. Only WTE rows change after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    wte: Tensor,
    pub positional: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

fn is_layer_norm(name: &str) -> bool {
    name.contains("ln")
}

/// Tensor names and shapes in canonical (archive) order.
pub fn tensor_layout(c: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![
        ("wte".to_string(), vec![c.vocab_size, c.d_model]),
        ("positional".to_string(), vec![c.context_length, c.d_model]),
    ];
    for l in 0..c.n_layers {
        for (field, shape) in LAYER_FIELDS.iter().zip(LayerWeights::shapes(c)) {
            out.push((format!("layers.{l}.{field}"), shape));
        }
    }
    out.push(("final_ln.gamma".to_string(), vec![c.d_model]));
    out.push(("final_ln.beta".to_string(), vec![c.d_model]));
    out
}

impl EncoderWeights {
    /// Normal(0, 0.02) everywhere except layer norms (gamma = 1, beta = 0).
    pub fn init_random(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut named = BTreeMap::new();
        for (name, shape) in tensor_layout(config) {
            let n: usize = shape.iter().product();
            let data = if is_layer_norm(&name) {
                vec![if name.ends_with("gamma") { 1.0 } else { 0.0 }; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            named.insert(name, Tensor::from_raw(shape, data));
        }
        Self::from_named(config, named)
    }

    /// Assembles weights from a name → tensor map, checking every shape.
    pub fn from_named(config: &EncoderConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut ordered = Vec::new();
        for (name, shape) in tensor_layout(config) {
            let t = named
                .remove(&name)
                .ok_or_else(|| EmbeditError::Config(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(EmbeditError::dim("weights", &shape, t.shape()));
            }
            ordered.push(t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(EmbeditError::Config(format!("unexpected tensor {extra}")));
        }
        let final_beta = ordered.pop().expect("layout");
        let final_gamma = ordered.pop().expect("layout");
        let mut it = ordered.into_iter();
        let wte = it.next().expect("layout");
        let positional = it.next().expect("layout");
        let rest: Vec<Tensor> = it.collect();
        let layers = rest
            .chunks(16)
            .map(|c| LayerWeights::from_fields(c.to_vec()))
            .collect();
        Ok(EncoderWeights {
            wte,
            positional,
            layers,
            final_gamma,
            final_beta,
        })
    }

    /// Name/tensor pairs in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("wte".to_string(), &self.wte),
            ("positional".to_string(), &self.positional),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{l}.{field}"), t));
            }
        }
        out.push(("final_ln.gamma".to_string(), &self.final_gamma));
        out.push(("final_ln.beta".to_string(), &self.final_beta));
        out
    }

    pub fn wte(&self) -> &Tensor {
        &self.wte
    }

    pub fn vocab_size(&self) -> usize {
        self.wte.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.wte.shape()[1]
    }

    pub fn wte_row(&self, id: u32) -> Result<&[f64]> {
        self.check_id(id)?;
        Ok(self.wte.row(id as usize))
    }

    /// Overwrites one WTE row. The only mutation the encoder allows.
    pub fn set_wte_row(&mut self, id: u32, row: &[f64]) -> Result<()> {
        self.check_id(id)?;
        if row.len() != self.d_model() {
            return Err(EmbeditError::dim("set_wte_row", &[self.d_model()], &[row.len()]));
        }
        if let Some(index) = row.iter().position(|v| !v.is_finite()) {
            return Err(EmbeditError::NonFinite { index });
        }
        self.wte.row_mut(id as usize).copy_from_slice(row);
        Ok(())
    }

    fn check_id(&self, id: u32) -> Result<()> {
        if id as usize >= self.vocab_size() {
            return Err(EmbeditError::Index {
                id,
                vocab_size: self.vocab_size(),
            });
        }
        Ok(())
    }

    /// Bitwise equality over every parameter.
    pub fn bitwise_eq(&self, other: &EncoderWeights) -> bool {
        let (a, b) = (self.named_tensors(), other.named_tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }

    /// `(tensor name, flat index)` of every scalar whose bits differ.
    pub fn diff(&self, other: &EncoderWeights) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for ((name, a), (_, b)) in self.named_tensors().into_iter().zip(other.named_tensors()) {
            for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                if x.to_bits() != y.to_bits() {
                    out.push((name.clone(), i));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let c = EncoderConfig::tiny(20);
        let a = EncoderWeights::init_random(&c, 42).unwrap();
        let b = EncoderWeights::init_random(&c, 42).unwrap();
        assert!(a.bitwise_eq(&b));
        let other = EncoderWeights::init_random(&c, 2).unwrap();
        let one = EncoderWeights::init_random(&c, 1).unwrap();
        assert!(!one.wte().bitwise_eq(other.wte()));
    }

    #[test]
    fn layer_norms_start_at_identity() {
        let c = EncoderConfig::tiny(20);
        let w = EncoderWeights::init_random(&c, 7).unwrap();
        for (name, t) in w.named_tensors() {
            if name.ends_with("gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            } else if name.ends_with("beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let total: usize = w.named_tensors().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(total, c.param_count());
    }

    #[test]
    fn wte_row_bounds() {
        let c = EncoderConfig::tiny(20);
        let mut w = EncoderWeights::init_random(&c, 7).unwrap();
        assert!(matches!(w.wte_row(20), Err(EmbeditError::Index { id: 20, .. })));
        assert!(w.set_wte_row(3, &[0.0; 7]).is_err());
        w.set_wte_row(3, &[0.5; 8]).unwrap();
        assert_eq!(w.wte_row(3).unwrap(), &[0.5; 8]);
        let fresh = EncoderWeights::init_random(&c, 7).unwrap();
        let d = w.diff(&fresh);
        assert_eq!(d.len(), 8);
        assert!(d.iter().all(|(n, i)| n == "wte" && (24..32).contains(i)));
    }
}
