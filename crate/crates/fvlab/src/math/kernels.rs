// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared numeric kernels.
//!
//! Every kernel computes in f64 (sequential index-order accumulation) and
//! rounds to f32 exactly once per output element. Products of f32 operands
//! are exact in f64, so dot products here are correctly rounded up to a
//! single f64 accumulation. The fixed order makes repeated calls bit-identical
//! regardless of parallelism above this layer.

/// `a [m,k] @ b [k,n]`, row-major.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let aip = aip as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (accj, &bv) in acc.iter_mut().zip(brow.iter()) {
                *accj += aip * bv as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
            *o = v as f32;
        }
    }
    out
}

/// `a [m,k] @ b^T` where `b` is `[n,k]`.
pub fn matmul_tb(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av as f64 * bv as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

/// `a^T @ b` where `a` is `[k,m]` and `b` is `[k,n]`.
pub fn matmul_ta(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aip = a[p * m + i] as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (accj, &bv) in acc.iter_mut().zip(brow.iter()) {
                *accj += aip * bv as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
            *o = v as f32;
        }
    }
    out
}

/// Softmax of one row with max-shift stabilization; f64 exp and sum.
pub fn softmax_row(row: &[f32], out: &mut [f32]) {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut sum = 0.0f64;
    let mut exps = vec![0.0f64; row.len()];
    for (e, &x) in exps.iter_mut().zip(row.iter()) {
        *e = libm::exp(x as f64 - m);
        sum += *e;
    }
    for (o, &e) in out.iter_mut().zip(exps.iter()) {
        *o = (e / sum) as f32;
    }
}

/// Masked softmax for causal attention scores `[s,s]`: row `i` normalizes
/// over columns `0..=i`; masked-out entries are exactly zero.
pub fn causal_softmax(scores: &[f32], s: usize) -> Vec<f32> {
    debug_assert_eq!(scores.len(), s * s);
    let mut out = vec![0.0f32; s * s];
    for i in 0..s {
        let row = &scores[i * s..i * s + i + 1];
        softmax_row(row, &mut out[i * s..i * s + i + 1]);
    }
    out
}

/// Per-row layer norm over the last axis, then affine `gamma/beta`.
/// Returns the output plus the per-row `(mean, rstd)` needed by backward.
pub fn layer_norm(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    rows: usize,
    cols: usize,
    eps: f64,
) -> (Vec<f32>, Vec<(f64, f64)>) {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![0.0f32; rows * cols];
    let mut stats = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mean = 0.0f64;
        for &v in row {
            mean += v as f64;
        }
        mean /= cols as f64;
        let mut var = 0.0f64;
        for &v in row {
            let d = v as f64 - mean;
            var += d * d;
        }
        var /= cols as f64;
        // eps inside the sqrt doubles as the zero-variance guard.
        let rstd = 1.0 / (var + eps).sqrt();
        stats.push((mean, rstd));
        for c in 0..cols {
            let xhat = (row[c] as f64 - mean) * rstd;
            out[r * cols + c] = (xhat * gamma[c] as f64 + beta[c] as f64) as f32;
        }
    }
    (out, stats)
}

/// Tanh-form GELU.
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + libm::tanh(c * (x + 0.044715 * x * x * x)))) as f32
}

/// Derivative of the tanh-form GELU, evaluated in f64.
pub fn gelu_grad(x: f32) -> f64 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Summed cross-entropy of row-wise logits against integer targets, via
/// log-sum-exp in f64. Returns `(total_ce, per_row_probs)`; the probabilities
/// are kept for the backward pass.
pub fn cross_entropy_rows(
    logits: &[f32],
    targets: &[u32],
    rows: usize,
    cols: usize,
) -> (f64, Vec<f32>) {
    debug_assert_eq!(logits.len(), rows * cols);
    debug_assert_eq!(targets.len(), rows);
    let mut probs = vec![0.0f32; rows * cols];
    let mut total = 0.0f64;
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for &x in row {
            sum += libm::exp(x as f64 - m);
        }
        let lse = m + libm::log(sum);
        total += lse - row[targets[r] as usize] as f64;
        for c in 0..cols {
            probs[r * cols + c] = (libm::exp(row[c] as f64 - m) / sum) as f32;
        }
    }
    (total, probs)
}

/// `<a, b>` with f64 accumulation.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

/// Project `row` onto the orthogonal complement of unit direction `u`,
/// in place conceptually: returns `row - <row,u> u`.
pub fn project_out(row: &[f32], unit: &[f32]) -> Vec<f32> {
    let c = dot(row, unit);
    row.iter()
        .zip(unit.iter())
        .map(|(&h, &u)| (h as f64 - c * u as f64) as f32)
        .collect()
}
