//! Linear probing of WTE rows: does the embedding table encode a binary attribute?

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderWeights, Vocab};
use crate::error::{EmbeditError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeItem {
    pub word: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDataset {
    pub label_names: [String; 2],
    pub items: Vec<ProbeItem>,
}

impl ProbeDataset {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        for item in &self.items {
            if item.label > 1 {
                return Err(EmbeditError::Dataset(format!("{:?}: label {} not in {{0, 1}}", item.word, item.label)));
            }
            vocab.text_ids(&item.word)?;
        }
        check_both_classes(&self.labels())
    }
}

fn check_both_classes(labels: &[u8]) -> Result<()> {
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(EmbeditError::Degenerate("probe labels contain a single class".into()));
    }
    Ok(())
}

/// One row per word: the WTE row of a single-token word, or the mean of a
/// multi-token word's rows.
pub fn extract_features(dataset: &ProbeDataset, weights: &EncoderWeights, vocab: &Vocab) -> Result<Vec<Vec<f64>>> {
    let d = weights.d_model();
    dataset
        .items
        .iter()
        .map(|item| {
            let ids = vocab.text_ids(&item.word)?;
            if let [id] = ids[..] {
                return Ok(weights.wte_row(id)?.to_vec());
            }
            let mut acc = vec![0.0; d];
            for &id in &ids {
                for (a, v) in acc.iter_mut().zip(weights.wte_row(id)?) {
                    *a += v;
                }
            }
            Ok(acc.into_iter().map(|v| v / ids.len() as f64).collect())
        })
        .collect()
}

/// Seeded shuffle of `0..n`, then a prefix split into (train, test) indices.
pub fn split(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(EmbeditError::Range(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * train_fraction).round() as usize;
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegParams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for LogRegParams {
    fn default() -> Self {
        LogRegParams {
            learning_rate: 0.1,
            epochs: 2000,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weight: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl ProbeModel {
    pub fn zeros(d: usize) -> Self {
        ProbeModel {
            weight: vec![0.0; d],
            bias: 0.0,
        }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.weight.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.logit(x) > 0.0)
    }

    /// Fraction of correct predictions, in `[0, 1]`.
    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[u8]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let correct = features
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        correct as f64 / features.len() as f64
    }

    /// Mean negative log-likelihood plus `l2·‖w‖²/2`.
    pub fn loss(&self, features: &[Vec<f64>], labels: &[u8], l2: f64) -> f64 {
        let n = features.len() as f64;
        let nll: f64 = features
            .iter()
            .zip(labels)
            .map(|(x, &y)| {
                let z = self.logit(x);
                if y == 1 {
                    softplus(-z)
                } else {
                    softplus(z)
                }
            })
            .sum();
        nll / n + 0.5 * l2 * self.weight.iter().map(|w| w * w).sum::<f64>()
    }

    /// Analytic gradient of [`ProbeModel::loss`] as (dw, db).
    pub fn gradient(&self, features: &[Vec<f64>], labels: &[u8], l2: f64) -> (Vec<f64>, f64) {
        let n = features.len() as f64;
        let mut gw: Vec<f64> = self.weight.iter().map(|w| l2 * w).collect();
        let mut gb = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let r = (sigmoid(self.logit(x)) - f64::from(y)) / n;
            for (g, v) in gw.iter_mut().zip(x) {
                *g += r * v;
            }
            gb += r;
        }
        (gw, gb)
    }
}

/// Full-batch gradient descent from zero initialization.
pub fn train_logreg(features: &[Vec<f64>], labels: &[u8], params: &LogRegParams) -> Result<ProbeModel> {
    train_logreg_traced(features, labels, params).map(|(m, _)| m)
}

/// As [`train_logreg`], also returning the loss before each epoch.
pub fn train_logreg_traced(
    features: &[Vec<f64>],
    labels: &[u8],
    params: &LogRegParams,
) -> Result<(ProbeModel, Vec<f64>)> {
    if features.len() < 2 || features.len() != labels.len() {
        return Err(EmbeditError::Dataset(format!(
            "need >= 2 labelled rows, got {} rows and {} labels",
            features.len(),
            labels.len()
        )));
    }
    check_both_classes(labels)?;
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|r| r.len() != d) {
        return Err(EmbeditError::dim("train_logreg", &[d], &[bad.len()]));
    }
    let mut model = ProbeModel::zeros(d);
    let mut history = Vec::with_capacity(params.epochs);
    for _ in 0..params.epochs {
        history.push(model.loss(features, labels, params.l2));
        let (gw, gb) = model.gradient(features, labels, params.l2);
        for (w, g) in model.weight.iter_mut().zip(gw) {
            *w -= params.learning_rate * g;
        }
        model.bias -= params.learning_rate * gb;
    }
    Ok((model, history))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Per seed: 80:20 split, train, test. Returns (mean, population std) of the
/// test accuracy in `[0, 1]`.
pub fn accuracy_over_seeds_features(
    features: &[Vec<f64>],
    labels: &[u8],
    seeds: &[u64],
    params: &LogRegParams,
) -> Result<(f64, f64)> {
    if seeds.len() < 2 {
        return Err(EmbeditError::Range("need at least two seeds".into()));
    }
    let mut accs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (train, test) = split(features.len(), 0.8, seed)?;
        let model = train_logreg(&pick(features, &train), &pick(labels, &train), params)?;
        accs.push(model.accuracy(&pick(features, &test), &pick(labels, &test)));
    }
    Ok(mean_std(&accs))
}

pub fn accuracy_over_seeds(
    dataset: &ProbeDataset,
    weights: &EncoderWeights,
    vocab: &Vocab,
    seeds: &[u64],
    params: &LogRegParams,
) -> Result<(f64, f64)> {
    dataset.validate(vocab)?;
    let features = extract_features(dataset, weights, vocab)?;
    accuracy_over_seeds_features(&features, &dataset.labels(), seeds, params)
}
