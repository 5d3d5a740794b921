//! Shared numeric primitives.
//!
//! Both the differentiable tape ops and the no-grad inference path call
//! these functions, so the two paths produce bit-identical values for the
//! same inputs.

use ndarray::{Array2, ArrayView2};

/// Large negative constant used to mask attention logits. exp() of it is 0.
pub const MASK_NEG: f64 = -1.0e30;

pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    a.dot(&b)
}

/// a · bᵀ
pub fn matmul_nt(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    a.dot(&b.t())
}

/// Add a (1, n) bias row to every row of a.
pub fn add_bias(a: ArrayView2<f64>, bias: ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        for (v, b) in row.iter_mut().zip(bias.row(0).iter()) {
            *v += *b;
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter() {
            sum += (*v - max).exp();
        }
        let lse = max + sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Layer norm over the last axis: (x - mean) / sqrt(var + eps) * gain + bias.
pub fn layer_norm(
    x: ArrayView2<f64>,
    gain: ArrayView2<f64>,
    bias: ArrayView2<f64>,
    eps: f64,
) -> Array2<f64> {
    let n = x.ncols() as f64;
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[[0, j]] + bias[[0, j]];
        }
    }
    out
}

/// Per-row normalization statistics, needed by the layer-norm backward pass.
pub fn layer_norm_stats(x: ArrayView2<f64>, eps: f64) -> Vec<(f64, f64)> {
    let n = x.ncols() as f64;
    x.rows()
        .into_iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub fn gelu(a: ArrayView2<f64>) -> Array2<f64> {
    a.mapv(gelu_scalar)
}

/// Add MASK_NEG above the diagonal (future positions of a square score matrix).
pub fn causal_mask(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    let (r, c) = out.dim();
    debug_assert_eq!(r, c);
    for i in 0..r {
        for j in (i + 1)..c {
            out[[i, j]] += MASK_NEG;
        }
    }
    out
}
