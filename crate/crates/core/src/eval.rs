//! Hidden-state evaluation of edits.
//!
//! A frozen reference encoder supplies EOS-pooled anchors for the source and
//! destination prompts; an edited encoder's pooled state counts as
//! "destination" when it is strictly closer (by cosine) to the destination
//! anchor. Efficacy, generality and specificity are percentages of prompts
//! classified as intended.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{normalize, Encoder};
use crate::error::{EmbeditError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Source,
    Destination,
}

fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let nb = b.norm();
    if nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (a.norm() * nb)
}

/// Destination iff `cos(test, dst) > cos(test, src)`; ties go to source.
pub fn classify(test: &Tensor, src_ref: &Tensor, dst_ref: &Tensor) -> Result<Label> {
    if test.shape() != src_ref.shape() || test.shape() != dst_ref.shape() {
        return Err(EmbeditError::dim("classify", test.shape(), src_ref.shape()));
    }
    if test.norm() == 0.0 {
        return Err(EmbeditError::Degenerate("zero-norm test vector".into()));
    }
    if src_ref.norm() == 0.0 && dst_ref.norm() == 0.0 {
        return Err(EmbeditError::Degenerate("both reference vectors are zero".into()));
    }
    Ok(if cosine(test, dst_ref) > cosine(test, src_ref) {
        Label::Destination
    } else {
        Label::Source
    })
}

/// True when `phrase`'s words occur contiguously among `prompt`'s words.
pub fn contains_phrase(prompt: &str, phrase: &str) -> bool {
    let words = normalize(prompt);
    let needle = normalize(phrase);
    !needle.is_empty() && words.windows(needle.len()).any(|w| w == needle.as_slice())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditEntry {
    pub source: String,
    pub destination: String,
    pub target_word: String,
    #[serde(default)]
    pub positives: Vec<(String, String)>,
    #[serde(default)]
    pub negatives: Vec<(String, String)>,
}

impl EditEntry {
    pub fn validate(&self) -> Result<()> {
        let fail = |what: String| Err(EmbeditError::Dataset(format!("entry {:?}: {what}", self.target_word)));
        if !contains_phrase(&self.source, &self.target_word) {
            return fail(format!("source {:?} lacks the target word", self.source));
        }
        if let Some((p, _)) = self.positives.iter().find(|(p, _)| !contains_phrase(p, &self.target_word)) {
            return fail(format!("positive {p:?} lacks the target word"));
        }
        if let Some((n, _)) = self.negatives.iter().find(|(n, _)| contains_phrase(n, &self.target_word)) {
            return fail(format!("negative {n:?} contains the target word"));
        }
        Ok(())
    }
}

fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| EmbeditError::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn load_edit_entries(path: impl AsRef<Path>) -> Result<Vec<EditEntry>> {
    load_jsonl(path.as_ref())
}

pub fn load_gender_entries(path: impl AsRef<Path>) -> Result<Vec<GenderEntry>> {
    load_jsonl(path.as_ref())
}

/// Metrics for one entry. Percentages in `[0, 100]`; standard errors are
/// binomial over the entry's prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub target_word: String,
    pub efficacy: f64,
    pub generality: Option<f64>,
    pub generality_se: Option<f64>,
    pub specificity: Option<f64>,
    pub specificity_se: Option<f64>,
    pub strict_specificity: Option<f64>,
    pub n_positives: usize,
    pub n_negatives: usize,
}

fn percent_and_se(successes: usize, n: usize) -> (Option<f64>, Option<f64>) {
    if n == 0 {
        return (None, None);
    }
    let p = successes as f64 / n as f64;
    (Some(100.0 * p), Some(100.0 * (p * (1.0 - p) / n as f64).sqrt()))
}

/// Scores one edit with `edited` against the frozen `reference` encoder.
pub fn evaluate_edit(entry: &EditEntry, edited: &Encoder, reference: &Encoder) -> Result<MetricReport> {
    entry.validate()?;
    let judge = |src: &str, dst: &str| -> Result<Label> {
        let test = edited.encode_prompt(src)?;
        let src_ref = reference.encode_prompt(src)?;
        let dst_ref = reference.encode_prompt(dst)?;
        classify(&test.pooled, &src_ref.pooled, &dst_ref.pooled)
    };

    let efficacy = if judge(&entry.source, &entry.destination)? == Label::Destination {
        100.0
    } else {
        0.0
    };

    let mut general = 0;
    for (src, dst) in &entry.positives {
        general += usize::from(judge(src, dst)? == Label::Destination);
    }
    let mut specific = 0;
    let mut strict = 0;
    for (src, dst) in &entry.negatives {
        specific += usize::from(judge(src, dst)? == Label::Source);
        let a = edited.encode_prompt(src)?;
        let b = reference.encode_prompt(src)?;
        strict += usize::from(a.bitwise_eq(&b));
    }
    let (generality, generality_se) = percent_and_se(general, entry.positives.len());
    let (specificity, specificity_se) = percent_and_se(specific, entry.negatives.len());
    let (strict_specificity, _) = percent_and_se(strict, entry.negatives.len());
    Ok(MetricReport {
        target_word: entry.target_word.clone(),
        efficacy,
        generality,
        generality_se,
        specificity,
        specificity_se,
        strict_specificity,
        n_positives: entry.positives.len(),
        n_negatives: entry.negatives.len(),
    })
}

/// Mean of a metric over entries with its standard error over entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl Summary {
    fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Some(Summary {
            mean,
            se,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub efficacy: Option<Summary>,
    pub generality: Option<Summary>,
    pub specificity: Option<Summary>,
    pub strict_specificity: Option<Summary>,
    pub per_entry: Vec<MetricReport>,
}

pub fn aggregate(per_entry: Vec<MetricReport>) -> EvalReport {
    let collect = |f: &dyn Fn(&MetricReport) -> Option<f64>| Summary::of(&per_entry.iter().filter_map(f).collect::<Vec<_>>());
    EvalReport {
        efficacy: collect(&|r| Some(r.efficacy)),
        generality: collect(&|r| r.generality),
        specificity: collect(&|r| r.specificity),
        strict_specificity: collect(&|r| r.strict_specificity),
        per_entry,
    }
}

impl EvalReport {
    pub fn text_table(&self) -> String {
        let fmt = |s: &Option<Summary>| match s {
            Some(s) => format!("{:6.2} ± {:5.2}  (n={})", s.mean, s.se, s.count),
            None => "   n/a".to_string(),
        };
        let mut out = String::new();
        let _ = writeln!(out, "metric              value");
        let _ = writeln!(out, "efficacy            {}", fmt(&self.efficacy));
        let _ = writeln!(out, "generality          {}", fmt(&self.generality));
        let _ = writeln!(out, "specificity         {}", fmt(&self.specificity));
        let _ = writeln!(out, "strict specificity  {}", fmt(&self.strict_specificity));
        out
    }
}

/// Prepares entries for sequential editing: drops entries whose target is in
/// `exclusions`, then drops from each entry's negatives any pair whose source
/// prompt contains another remaining entry's target word.
pub fn filter_sequential_dataset(entries: &[EditEntry], exclusions: &[String]) -> Vec<EditEntry> {
    let excluded: HashSet<Vec<String>> = exclusions.iter().map(|w| normalize(w)).collect();
    let kept: Vec<&EditEntry> = entries
        .iter()
        .filter(|e| !excluded.contains(&normalize(&e.target_word)))
        .collect();
    kept.iter()
        .enumerate()
        .map(|(i, entry)| {
            let mut out = (*entry).clone();
            out.negatives.retain(|(src, _)| {
                !kept
                    .iter()
                    .enumerate()
                    .any(|(j, other)| j != i && contains_phrase(src, &other.target_word))
            });
            out
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderEntry {
    pub profession: String,
    pub validation: String,
    pub tests: Vec<String>,
    pub female_ref: String,
    pub male_ref: String,
}

impl GenderEntry {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.tests.iter().find(|t| !contains_phrase(t, &self.profession)) {
            return Err(EmbeditError::Dataset(format!(
                "gender entry {:?}: test {t:?} lacks the profession",
                self.profession
            )));
        }
        Ok(())
    }
}

/// Percentage of test prompts whose edited pooled state is closer to the
/// reference female anchor than to the male one. The classifier is
/// deterministic, so every sample of a prompt votes the same way.
pub fn female_percentage(entry: &GenderEntry, edited: &Encoder, reference: &Encoder, samples_per_prompt: usize) -> Result<f64> {
    if samples_per_prompt == 0 {
        return Err(EmbeditError::Range("samples_per_prompt must be >= 1".into()));
    }
    entry.validate()?;
    if entry.tests.is_empty() {
        return Err(EmbeditError::Dataset(format!("gender entry {:?} has no tests", entry.profession)));
    }
    let female = reference.encode_prompt(&entry.female_ref)?.pooled;
    let male = reference.encode_prompt(&entry.male_ref)?.pooled;
    let mut hits = 0;
    for t in &entry.tests {
        let pooled = edited.encode_prompt(t)?.pooled;
        if classify(&pooled, &male, &female)? == Label::Destination {
            hits += samples_per_prompt;
        }
    }
    Ok(100.0 * hits as f64 / (entry.tests.len() * samples_per_prompt) as f64)
}

/// Mean of `|F_p − 50| / 50` over professions.
pub fn gender_delta(f_values: &[f64]) -> Result<f64> {
    if f_values.is_empty() {
        return Err(EmbeditError::Range("gender_delta of no professions".into()));
    }
    Ok(f_values.iter().map(|f| (f - 50.0).abs() / 50.0).sum::<f64>() / f_values.len() as f64)
}
