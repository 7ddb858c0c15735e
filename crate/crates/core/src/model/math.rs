//! Numeric kernels shared by the forward and backward passes: GELU,
//! softmax over rows with −∞ support, layer normalization with its
//! backward, and single-head causal attention.
//!
//! Everything is f64; reduction order is fixed so results are reproducible
//! bit-for-bit on any machine.

use ndarray::{Array1, Array2, ArrayView2};

pub const LN_EPS: f64 = 1e-5;

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// In-place stable softmax; −∞ entries become exactly 0. The row must hold
/// at least one finite entry.
pub fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite(), "softmax over all -inf row");
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if v.is_finite() { (*v - max).exp() } else { 0.0 };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        softmax_slice(row.as_slice_mut().expect("contiguous row"));
    }
}

/// log(sum(exp(row))) computed stably over finite entries.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = row
        .iter()
        .map(|&v| if v.is_finite() { (v - max).exp() } else { 0.0 })
        .sum();
    max + sum.ln()
}

/// Per-row layer normalization cache: normalized activations and 1/σ.
pub struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_sigma: Array1<f64>,
}

pub fn layernorm_fwd(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut y = Array2::zeros((n, d));
    let mut xhat = Array2::zeros((n, d));
    let mut inv_sigma = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_sigma[i] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[[i, j]] = h;
            y[[i, j]] = g[j] * h + b[j];
        }
    }
    (y, LnCache { xhat, inv_sigma })
}

/// Returns (dx, dg, db).
pub fn layernorm_bwd(
    dy: &Array2<f64>,
    g: &Array1<f64>,
    cache: &LnCache,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    let mut dg = Array1::zeros(d);
    let mut db = Array1::zeros(d);
    for i in 0..n {
        let xh = cache.xhat.row(i);
        let dyr = dy.row(i);
        let mut sum_dyg = 0.0;
        let mut sum_dyg_xh = 0.0;
        for j in 0..d {
            let dyg = dyr[j] * g[j];
            sum_dyg += dyg;
            sum_dyg_xh += dyg * xh[j];
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
        }
        let inv = cache.inv_sigma[i];
        let m1 = sum_dyg / d as f64;
        let m2 = sum_dyg_xh / d as f64;
        for j in 0..d {
            dx[[i, j]] = inv * (dyr[j] * g[j] - m1 - xh[j] * m2);
        }
    }
    (dx, dg, db)
}

/// Single-head scaled-dot-product attention with an optional causal mask.
/// Returns the output; [`attention_with_probs`] also exposes the attention
/// matrix for the backward pass.
pub fn attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    causal: bool,
) -> Array2<f64> {
    attention_with_probs(q, k, v, causal).0
}

pub fn attention_with_probs(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    causal: bool,
) -> (Array2<f64>, Array2<f64>) {
    let d_k = q.ncols();
    assert_eq!(k.ncols(), d_k, "Q and K widths differ");
    assert_eq!(k.nrows(), v.nrows(), "K and V lengths differ");
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut scores = q.dot(&k.t());
    scores *= scale;
    if causal {
        let (tq, tk) = scores.dim();
        assert_eq!(tq, tk, "causal mask requires square scores");
        for i in 0..tq {
            for j in i + 1..tk {
                scores[[i, j]] = f64::NEG_INFINITY;
            }
        }
    }
    softmax_rows(&mut scores);
    let out = scores.dot(&v);
    (out, scores)
}

/// Backward of softmax applied row-wise: given probabilities `p` and
/// upstream `dp`, produce d(scores).
pub fn softmax_rows_bwd(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let (n, d) = p.dim();
    let mut ds = Array2::zeros((n, d));
    for i in 0..n {
        let mut dot = 0.0;
        for j in 0..d {
            dot += dp[[i, j]] * p[[i, j]];
        }
        for j in 0..d {
            ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot);
        }
    }
    ds
}
