//! Python bindings: encoders, single and sequential edits, revert, bias
//! balancing, budget accounting and the proxy evaluation metrics.

use embedit::bias::{edit_balance, BalanceMode, BalancerParams, BiasEditRequest};
use embedit::editor::{
    edit_single, param_budget_report, revert, EditHyperparams, EditLedger, EditRequest, EditResult,
    LossPositions,
};
use embedit::eval::{classify, evaluate_edit, gender_delta, EditEntry, Label};
use embedit::optim::OptimizerKind;
use embedit::{fixtures, Encoder, EncoderConfig, Tensor, Vocab};
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

pyo3::create_exception!(embedit_py, EmbeditError, PyException);

fn to_py(e: embedit::EmbeditError) -> PyErr {
    EmbeditError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn result_dict<'py>(py: Python<'py>, r: &EditResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("initial_loss", r.initial_loss)?;
    d.set_item("tau", r.threshold_tau)?;
    d.set_item("final_loss", r.final_loss)?;
    d.set_item("iterations_run", r.iterations_run)?;
    d.set_item("optimizer_steps", r.optimizer_steps)?;
    d.set_item("converged", r.converged)?;
    d.set_item("edited_token_ids", r.edited_token_ids.clone())?;
    Ok(d)
}

/// A CLIP-style text encoder with its vocabulary.
#[pyclass(name = "Encoder", module = "embedit_py", skip_from_py_object)]
#[derive(Clone)]
struct PyEncoder {
    inner: Encoder,
}

#[pymethods]
impl PyEncoder {
    /// Random encoder. `words` defaults to the built-in fixture vocabulary.
    #[staticmethod]
    #[pyo3(signature = (seed, words=None, d_model=8, n_layers=2, n_heads=2, d_ff=32, context_length=8))]
    fn random(
        seed: u64,
        words: Option<Vec<String>>,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_ff: usize,
        context_length: usize,
    ) -> PyResult<Self> {
        let vocab = match words {
            Some(w) => Vocab::from_words(&w).map_err(to_py)?,
            None => fixtures::fixture_vocab(),
        };
        let config = EncoderConfig {
            vocab_size: 0,
            d_model,
            n_layers,
            n_heads,
            d_ff,
            context_length,
            eps: 1e-5,
        };
        Ok(PyEncoder {
            inner: Encoder::random(config, vocab, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyEncoder {
            inner: Encoder::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn copy(&self) -> Self {
        self.clone()
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.config.d_model
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.config.param_count()
    }

    fn tokenize(&self, prompt: &str) -> PyResult<Vec<u32>> {
        Ok(self.inner.tokenize(prompt).map_err(to_py)?.ids)
    }

    fn token_id(&self, word: &str) -> Option<u32> {
        self.inner.vocab.id(word)
    }

    /// Returns `(sequence, pooled)` hidden states for a prompt.
    fn encode(&self, prompt: &str) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let h = self.inner.encode_prompt(prompt).map_err(to_py)?;
        let rows = (0..h.sequence.rows()).map(|r| h.sequence.row(r).to_vec()).collect();
        Ok((rows, h.pooled.into_data()))
    }

    fn wte_row(&self, token_id: u32) -> PyResult<Vec<f64>> {
        Ok(self.inner.weights.wte_row(token_id).map_err(to_py)?.to_vec())
    }

    /// True when both encoders hold bitwise-identical weights.
    fn same_weights(&self, other: &PyEncoder) -> bool {
        self.inner.weights.bitwise_eq(&other.inner.weights)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Encoder(d_model={}, n_layers={}, n_heads={}, vocab={}, context_length={})",
            c.d_model, c.n_layers, c.n_heads, c.vocab_size, c.context_length
        )
    }
}

/// Ordered record of edits, sufficient to revert them exactly.
#[pyclass(name = "Ledger", module = "embedit_py", skip_from_py_object)]
#[derive(Clone, Default)]
struct PyLedger {
    inner: EditLedger,
}

#[pymethods]
impl PyLedger {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyLedger {
            inner: EditLedger::from_json(text).map_err(to_py)?,
        })
    }

    fn edited_ids(&self) -> Vec<u32> {
        self.inner.edited_ids()
    }
}

/// Edits `target`'s embedding rows in place so `source` encodes like
/// `destination`. Returns the edit result as a dict.
#[pyfunction]
#[pyo3(signature = (encoder, ledger, source, destination, target, lam=0.2, max_iters=100, lr=1e-3, optimizer="adam", loss_positions="full_sequence"))]
#[allow(clippy::too_many_arguments)]
fn edit<'py>(
    py: Python<'py>,
    encoder: &mut PyEncoder,
    ledger: &mut PyLedger,
    source: &str,
    destination: &str,
    target: &str,
    lam: f64,
    max_iters: usize,
    lr: f64,
    optimizer: &str,
    loss_positions: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let hyper = EditHyperparams {
        lambda: lam,
        max_iters,
        learning_rate: lr,
        optimizer: optimizer.parse::<OptimizerKind>().map_err(EmbeditError::new_err)?,
        loss_positions: loss_positions.parse::<LossPositions>().map_err(EmbeditError::new_err)?,
    };
    let request = EditRequest::new(source, destination, target);
    let r = edit_single(&mut encoder.inner, &request, &hyper, &mut ledger.inner).map_err(to_py)?;
    result_dict(py, &r)
}

/// Undoes the last `n` ledger entries (all of them by default).
#[pyfunction(name = "revert")]
#[pyo3(signature = (encoder, ledger, n=None))]
fn revert_py(encoder: &mut PyEncoder, ledger: &mut PyLedger, n: Option<usize>) -> PyResult<()> {
    let n = n.unwrap_or(ledger.inner.len());
    revert(&mut encoder.inner.weights, &mut ledger.inner, n).map_err(to_py)
}

/// Balances a profession between a stereotypical and a counter prompt.
#[pyfunction]
#[pyo3(signature = (encoder, ledger, profession, stereotypical, counter, mode="auto", lambda_manual=None, max_iters=100, lr=1e-3))]
#[allow(clippy::too_many_arguments)]
fn balance<'py>(
    py: Python<'py>,
    encoder: &mut PyEncoder,
    ledger: &mut PyLedger,
    profession: &str,
    stereotypical: &str,
    counter: &str,
    mode: &str,
    lambda_manual: Option<f64>,
    max_iters: usize,
    lr: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mode = match mode {
        "auto" => BalanceMode::Auto,
        "manual" => BalanceMode::Manual,
        other => return Err(EmbeditError::new_err(format!("unknown mode {other:?}"))),
    };
    let request = BiasEditRequest {
        profession: profession.into(),
        stereotypical_prompt: stereotypical.into(),
        counter_prompt: counter.into(),
        mode,
        lambda_manual,
    };
    let params = BalancerParams {
        max_iters,
        learning_rate: lr,
        ..BalancerParams::default()
    };
    let out = edit_balance(&mut encoder.inner, &request, &params, &mut ledger.inner).map_err(to_py)?;
    let d = result_dict(py, &out.result)?;
    d.set_item("delta", out.delta)?;
    d.set_item("alpha", out.alpha)?;
    Ok(d)
}

/// Per-edit parameter and FLOP counts for a ledger.
#[pyfunction]
fn budget<'py>(py: Python<'py>, encoder: &PyEncoder, ledger: &PyLedger) -> PyResult<Bound<'py, PyAny>> {
    let c = &encoder.inner.config;
    let report = param_budget_report(&ledger.inner, c.param_count(), c.d_model);
    let text = serde_json::to_string(&report.per_edit).map_err(|e| EmbeditError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

/// "source" or "destination": which reference the test vector is closer to
/// by cosine similarity.
#[pyfunction(name = "classify")]
fn classify_py(test: Vec<f64>, src_ref: Vec<f64>, dst_ref: Vec<f64>) -> PyResult<&'static str> {
    let t = |v: Vec<f64>| Tensor::vector(v).map_err(to_py);
    Ok(match classify(&t(test)?, &t(src_ref)?, &t(dst_ref)?).map_err(to_py)? {
        Label::Source => "source",
        Label::Destination => "destination",
    })
}

/// Scores an edit from a JSON entry against a frozen reference encoder.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, entry_json: &str, edited: &PyEncoder, reference: &PyEncoder) -> PyResult<Bound<'py, PyAny>> {
    let entry: EditEntry = serde_json::from_str(entry_json).map_err(|e| EmbeditError::new_err(e.to_string()))?;
    let report = evaluate_edit(&entry, &edited.inner, &reference.inner).map_err(to_py)?;
    let text = serde_json::to_string(&report).map_err(|e| EmbeditError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

#[pyfunction(name = "gender_delta")]
fn gender_delta_py(f_values: Vec<f64>) -> PyResult<f64> {
    gender_delta(&f_values).map_err(to_py)
}

#[pymodule]
fn embedit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EmbeditError", m.py().get_type::<EmbeditError>())?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyLedger>()?;
    m.add_function(wrap_pyfunction!(edit, m)?)?;
    m.add_function(wrap_pyfunction!(revert_py, m)?)?;
    m.add_function(wrap_pyfunction!(balance, m)?)?;
    m.add_function(wrap_pyfunction!(budget, m)?)?;
    m.add_function(wrap_pyfunction!(classify_py, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gender_delta_py, m)?)?;
    Ok(())
}
