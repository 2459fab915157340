//! Value-level tensor kernels and their vector-Jacobian products.
//!
//! Every kernel accumulates in a fixed order, so results are bitwise
//! reproducible and independent of how many rows are processed at once.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `sqrt(2 / pi)` for the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Rotary position base.
pub const ROPE_BASE: f64 = 10_000.0;

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn expect_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

/// `c[m×n] = a[m×k] · b[k×n]` on raw slices.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`.
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_rank2("matmul", a)?;
    let (k2, n) = expect_rank2("matmul", b)?;
    if k != k2 {
        return Err(dim_err("matmul", a, b));
    }
    Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

/// Gradients of `a · b` given upstream `g`: returns `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    (
        matmul_nt_raw(g, b.data(), m, n, k),
        matmul_tn_raw(a.data(), g, m, k, n),
    )
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = expect_rank2("transpose", a)?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(dim_err("add", a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Adds a bias vector along the trailing axis.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.len() != x.cols() {
        return Err(dim_err("add_bias", x, bias));
    }
    let c = x.cols();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + bias.data()[i % c])
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of a single slice (max-shifted).
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_inplace(&mut out);
    out
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::input(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = src[base + j * inner];
            }
            softmax_inplace(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out[base + j * inner] = *b;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// VJP of softmax along `axis` given its output `y`.
pub fn softmax_backward(y: &Tensor, axis: usize, g: &[f64]) -> Vec<f64> {
    let shape = y.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let yd = y.data();
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                dot += yd[base + j * inner] * g[base + j * inner];
            }
            for j in 0..len {
                let idx = base + j * inner;
                out[idx] = yd[idx] * (g[idx] - dot);
            }
        }
    }
    out
}

/// Root-mean-square normalization over the trailing axis, scaled by `weight`.
pub fn rms_norm(x: &Tensor, weight: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if weight.len() != d {
        return Err(dim_err("rms_norm", x, weight));
    }
    let w = weight.data();
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let ms = src.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        for ((o, &v), &wv) in dst.iter_mut().zip(src).zip(w) {
            *o = v * r * wv;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Returns `(dx, dweight)`.
pub fn rms_norm_backward(x: &Tensor, weight: &Tensor, eps: f64, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let w = weight.data();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; d];
    for ((src, grow), dst) in x.data().chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
        let ms = src.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        let mut dot = 0.0;
        for j in 0..d {
            dot += grow[j] * w[j] * src[j];
            dw[j] += grow[j] * src[j] * r;
        }
        let coef = r * r * r * dot / d as f64;
        for j in 0..d {
            dst[j] = r * grow[j] * w[j] - coef * src[j];
        }
    }
    (dx, dw)
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("gelu preserves shape")
}

pub fn gelu_backward(x: &Tensor, g: &[f64]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(g)
        .map(|(&v, &gv)| gv * gelu_grad_scalar(v))
        .collect()
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, c) = expect_rank2("cross_entropy", logits)?;
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::input(format!("label {bad} out of range for {c} classes")));
    }
    Ok((n, c))
}

/// Mean negative log-likelihood (natural log) of `labels` under `softmax(logits)`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = check_labels(logits, labels)?;
    let mut total = 0.0;
    for (row, &l) in logits.data().chunks(c).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[l];
    }
    Ok(total / n as f64)
}

/// Gradient of `cross_entropy` w.r.t. logits, scaled by upstream `g`.
pub fn cross_entropy_backward(logits: &Tensor, labels: &[usize], g: f64) -> Vec<f64> {
    let c = logits.cols();
    let n = labels.len() as f64;
    let mut out = Vec::with_capacity(logits.len());
    for (row, &l) in logits.data().chunks(c).zip(labels) {
        let p = softmax_slice(row);
        out.extend(p.iter().enumerate().map(|(j, &pj)| {
            let t = if j == l { 1.0 } else { 0.0 };
            g * (pj - t) / n
        }));
    }
    out
}

fn rope_check(x: &Tensor, seq_len: usize, n_heads: usize) -> Result<usize> {
    let (rows, d) = expect_rank2("rope", x)?;
    if seq_len == 0 || rows % seq_len != 0 || n_heads == 0 || d % n_heads != 0 || !(d / n_heads).is_multiple_of(2) {
        return Err(Error::input(format!(
            "rope: rows {rows}, width {d} incompatible with seq_len {seq_len}, heads {n_heads}"
        )));
    }
    Ok(d / n_heads)
}

fn rope_apply(x: &Tensor, seq_len: usize, n_heads: usize, sign: f64) -> Result<Tensor> {
    let dh = rope_check(x, seq_len, n_heads)?;
    let d = x.cols();
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_mut(d).enumerate() {
        let pos = (r % seq_len) as f64;
        for h in 0..n_heads {
            for m in 0..dh / 2 {
                let theta = pos * ROPE_BASE.powf(-2.0 * m as f64 / dh as f64);
                let (s, c) = (sign * theta).sin_cos();
                let i0 = h * dh + 2 * m;
                let (a, b) = (row[i0], row[i0 + 1]);
                row[i0] = a * c - b * s;
                row[i0 + 1] = a * s + b * c;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Rotary position encoding on `[batch·seq × d]` rows; position is `row % seq_len`.
pub fn rope(x: &Tensor, seq_len: usize, n_heads: usize) -> Result<Tensor> {
    rope_apply(x, seq_len, n_heads, 1.0)
}

/// VJP of `rope`: the inverse rotation applied to the upstream gradient.
pub fn rope_backward(g: &Tensor, seq_len: usize, n_heads: usize) -> Result<Tensor> {
    rope_apply(g, seq_len, n_heads, -1.0)
}

/// Output of causal multi-head attention plus the attention weights needed
/// for the backward pass, laid out `[seq_block][head][query][key]`.
pub struct AttentionOut {
    pub out: Tensor,
    pub probs: Vec<f64>,
}

fn attention_check(q: &Tensor, k: &Tensor, v: &Tensor, seq_len: usize, n_heads: usize) -> Result<(usize, usize)> {
    if q.shape() != k.shape() {
        return Err(dim_err("attention", q, k));
    }
    if q.shape() != v.shape() {
        return Err(dim_err("attention", q, v));
    }
    let (rows, d) = expect_rank2("attention", q)?;
    if seq_len == 0 || rows % seq_len != 0 || n_heads == 0 || d % n_heads != 0 {
        return Err(Error::input(format!(
            "attention: rows {rows}, width {d} incompatible with seq_len {seq_len}, heads {n_heads}"
        )));
    }
    Ok((rows / seq_len, d / n_heads))
}

/// Strictly causal scaled dot-product attention over independent
/// sequences of `seq_len` rows each.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, seq_len: usize, n_heads: usize) -> Result<AttentionOut> {
    let (blocks, dh) = attention_check(q, k, v, seq_len, n_heads)?;
    let d = q.cols();
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; blocks * n_heads * seq_len * seq_len];
    for b in 0..blocks {
        for h in 0..n_heads {
            let pbase = (b * n_heads + h) * seq_len * seq_len;
            for i in 0..seq_len {
                let qi = (b * seq_len + i) * d + h * dh;
                let prow = &mut probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                for j in 0..=i {
                    let kj = (b * seq_len + j) * d + h * dh;
                    let mut s = 0.0;
                    for t in 0..dh {
                        s += qd[qi + t] * kd[kj + t];
                    }
                    prow[j] = s * scale;
                }
                softmax_inplace(&mut prow[..=i]);
                let orow = &mut out[qi..qi + dh];
                for j in 0..=i {
                    let vj = (b * seq_len + j) * d + h * dh;
                    let p = prow[j];
                    for t in 0..dh {
                        orow[t] += p * vd[vj + t];
                    }
                }
            }
        }
    }
    Ok(AttentionOut {
        out: Tensor::new(q.shape().to_vec(), out)?,
        probs,
    })
}

/// Returns `(dq, dk, dv)`.
pub fn causal_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    seq_len: usize,
    n_heads: usize,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = q.cols();
    let dh = d / n_heads;
    let blocks = q.rows() / seq_len;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; seq_len];
    for b in 0..blocks {
        for h in 0..n_heads {
            let pbase = (b * n_heads + h) * seq_len * seq_len;
            for i in 0..seq_len {
                let qi = (b * seq_len + i) * d + h * dh;
                let prow = &probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                let grow = &g[qi..qi + dh];
                let mut dot = 0.0;
                for j in 0..=i {
                    let vj = (b * seq_len + j) * d + h * dh;
                    let mut s = 0.0;
                    for t in 0..dh {
                        s += grow[t] * vd[vj + t];
                        dv[vj + t] += prow[j] * grow[t];
                    }
                    dp[j] = s;
                    dot += prow[j] * s;
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    let kj = (b * seq_len + j) * d + h * dh;
                    for t in 0..dh {
                        dq[qi + t] += ds * kd[kj + t];
                        dk[kj + t] += ds * qd[qi + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Gathers embedding rows.
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (vocab, d) = expect_rank2("embedding", table)?;
    if ids.is_empty() {
        return Err(Error::input("embedding: empty id list"));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            return Err(Error::input(format!("token id {id} out of range for vocab {vocab}")));
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], out)
}

pub fn embedding_backward(table_shape: &[usize], ids: &[usize], g: &[f64]) -> Vec<f64> {
    let d = table_shape[1];
    let mut out = vec![0.0; table_shape[0] * d];
    for (r, &id) in ids.iter().enumerate() {
        for j in 0..d {
            out[id * d + j] += g[r * d + j];
        }
    }
    out
}

/// Selects rows of a rank-2 tensor.
pub fn select_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let (n, d) = expect_rank2("select_rows", x)?;
    if rows.is_empty() {
        return Err(Error::input("select_rows: empty selection"));
    }
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        if r >= n {
            return Err(Error::Range(format!("row {r} of {n}")));
        }
        out.extend_from_slice(x.row(r));
    }
    Tensor::new(vec![rows.len(), d], out)
}

pub fn select_rows_backward(x_shape: &[usize], rows: &[usize], g: &[f64]) -> Vec<f64> {
    let d = x_shape[1];
    let mut out = vec![0.0; x_shape[0] * d];
    for (i, &r) in rows.iter().enumerate() {
        for j in 0..d {
            out[r * d + j] += g[i * d + j];
        }
    }
    out
}
