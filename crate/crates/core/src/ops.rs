//! Forward kernels shared by the tape and by direct callers.
//!
//! Every function here operates over the final axis ("rows") of its input;
//! there is no other broadcasting.

use crate::error::{EmbeditError, Result};
use crate::tensor::Tensor;

/// √(2/π), the tanh-GELU scale.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

/// Additive value used to mask attention logits.
pub const MASK_VALUE: f64 = -1e9;

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(EmbeditError::dim(op, other, &[0, 0])),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(EmbeditError::dim("matmul", a.shape(), b.shape()));
    }
    Ok(Tensor::from_raw(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n)))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let b_row = &b[t * n..(t + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_2d("transpose", a)?;
    Ok(Tensor::from_raw(vec![n, m], transpose_raw(a.data(), m, n)))
}

/// Normalized activations and reciprocal standard deviations saved for the VJP.
pub(crate) struct LayerNormSaved {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_raw(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormSaved)> {
    let d = x.last_dim();
    if gamma.shape() != [d] {
        return Err(EmbeditError::dim("layer_norm gamma", x.shape(), gamma.shape()));
    }
    if beta.shape() != [d] {
        return Err(EmbeditError::dim("layer_norm beta", x.shape(), beta.shape()));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(EmbeditError::Config(format!("layer_norm eps must be >= 0, got {eps}")));
    }
    let rows = x.rows();
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    let g = gamma.data();
    let b = beta.data();
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let denom = var + eps;
        // A zero-variance slice with eps = 0 normalizes to zeros.
        let rs = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * g[j] + b[j];
        }
    }
    Ok((Tensor::from_raw(x.shape().to_vec(), out), LayerNormSaved { xhat, rstd }))
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta` per final-axis slice,
/// with `var` the population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_raw(x, gamma, beta, eps).map(|(t, _)| t)
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = vec![0.0; x.numel()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * d..(r + 1) * d];
        let mut sum = 0.0;
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - max).exp();
            sum += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= sum;
        }
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Tanh-approximated GELU. The exact form is `x·Φ(x)` with the normal CDF.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor::from_raw(
        x.shape().to_vec(),
        x.data().iter().map(|&v| gelu_scalar(v)).collect(),
    )
}
