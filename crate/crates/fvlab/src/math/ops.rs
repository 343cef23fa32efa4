// SPDX-License-Identifier: MIT OR Apache-2.0

//! Public tensor operations. Thin validating wrappers over the kernels; the
//! tape ops in [`crate::math::tape`] call the same kernels, so forward values
//! agree bit-for-bit between the two paths.

use crate::error::{FvError, Result};
use crate::math::kernels;
use crate::math::tensor::Tensor;

/// Softmax along `axis`. Entries land in `(0, 1]` and each slice along the
/// axis sums to one; stabilized by max-shift.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    x.validate_finite("softmax input")?;
    if axis >= x.rank() {
        return Err(FvError::invalid(format!(
            "softmax axis {axis} out of rank {}",
            x.rank()
        )));
    }
    let shape = x.shape().to_vec();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let data = x.data();
    let mut out = vec![0.0f32; data.len()];
    let mut row = vec![0.0f32; axis_len];
    let mut srow = vec![0.0f32; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            for (a, rv) in row.iter_mut().enumerate() {
                *rv = data[o * axis_len * inner + a * inner + i];
            }
            kernels::softmax_row(&row, &mut srow);
            for (a, &sv) in srow.iter().enumerate() {
                out[o * axis_len * inner + a * inner + i] = sv;
            }
        }
    }
    Tensor::from_kernel(shape, out, "softmax")
}

/// `a @ b` for rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(FvError::shape(format!(
            "matmul {:?} @ {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = kernels::matmul(a.data(), b.data(), m, k, n);
    Tensor::from_kernel(vec![m, n], out, "matmul")
}

/// Layer norm over the last axis with affine parameters.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (rows, cols) = match x.shape() {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        s => return Err(FvError::shape(format!("layer_norm rank {s:?}"))),
    };
    if gamma.len() != cols || beta.len() != cols {
        return Err(FvError::shape("layer_norm affine params".into()));
    }
    let (out, _) = kernels::layer_norm(x.data(), gamma.data(), beta.data(), rows, cols, eps);
    Tensor::from_kernel(x.shape().to_vec(), out, "layer_norm")
}

/// Mean cross-entropy of `[rows, vocab]` logits against per-row targets.
/// Non-negative; zero exactly when each row is one-hot on its target.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    logits.validate_finite("cross_entropy input")?;
    let (rows, cols) = logits.dims2()?;
    if targets.len() != rows {
        return Err(FvError::shape(format!(
            "cross_entropy {} targets for {rows} rows",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= cols) {
        return Err(FvError::invalid(format!("target {t} >= vocab {cols}")));
    }
    let (total, _) = kernels::cross_entropy_rows(logits.data(), targets, rows, cols);
    Ok(total / rows as f64)
}

/// One Adam update. `param`, `grad`, `m`, `v` must share a length; `t` is the
/// 1-based step count. The update itself is evaluated in f64.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: usize,
    cfg: AdamParams,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(FvError::shape("adam_step length mismatch".into()));
    }
    if t == 0 {
        return Err(FvError::invalid("adam_step step count must be >= 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        if !g.is_finite() {
            return Err(FvError::NonFinite {
                op: "adam_step grad",
                index: i,
            });
        }
        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let mhat = mi / bc1;
        let vhat = vi / bc2;
        param[i] = (param[i] as f64 - cfg.lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng::DetRng;

    fn t1(v: Vec<f32>) -> Tensor {
        Tensor::new(vec![v.len()], v).unwrap()
    }

    #[test]
    fn softmax_symmetry() {
        let s = softmax(&t1(vec![0.0, 0.0]), 0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-7);
        assert!((s.data()[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn softmax_shift_forces_ratio() {
        let s = softmax(&t1(vec![1000.0, 1000.0 + (3.0f32).ln()]), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-6, "{:?}", s.data());
        assert!((s.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        let mut rng = DetRng::new(42);
        let x: Vec<f32> = (0..8).map(|_| rng.normal() as f32 * 3.0).collect();
        let s = softmax(&t1(x.clone()), 0).unwrap();
        // Independent oracle: plain f64 exp / sum, no max shift.
        let exps: Vec<f64> = x.iter().map(|&v| (v as f64).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (got, e) in s.data().iter().zip(exps.iter()) {
            assert!((*got as f64 - e / total).abs() <= 1e-6);
        }
        let sum: f64 = s.data().iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn softmax_rejects_non_finite_axis() {
        let x = t1(vec![0.0, 1.0]);
        assert!(softmax(&x, 1).is_err());
    }

    #[test]
    fn softmax_rows_of_matrix() {
        let x = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let s = softmax(&x, 1).unwrap();
        for r in 0..2 {
            let sum: f64 = s.row(r).unwrap().iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let a = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = matmul(&eye, &a).unwrap();
        assert!(out.bit_eq(&a));
    }

    #[test]
    fn matmul_matches_naive_f64_oracle() {
        let mut rng = DetRng::new(3);
        for _ in 0..5 {
            let a = Tensor::randn(vec![4, 6], 1.0, &mut rng).unwrap();
            let b = Tensor::randn(vec![6, 5], 1.0, &mut rng).unwrap();
            let got = matmul(&a, &b).unwrap();
            for i in 0..4 {
                for j in 0..5 {
                    let mut acc = 0.0f64;
                    for p in 0..6 {
                        acc += a.data()[i * 6 + p] as f64 * b.data()[p * 5 + j] as f64;
                    }
                    assert!((got.data()[i * 5 + j] as f64 - acc).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_hits_zero_variance_guard() {
        let x = t1(vec![5.0, 5.0, 5.0, 5.0]);
        let g = t1(vec![1.0; 4]);
        let b = t1(vec![0.0; 4]);
        let out = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for &v in out.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_stats_contract() {
        let mut rng = DetRng::new(8);
        let x = Tensor::randn(vec![3, 16], 2.0, &mut rng).unwrap();
        let g = t1(vec![1.0; 16]);
        let b = t1(vec![0.0; 16]);
        let out = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for r in 0..3 {
            let row = out.row(r).unwrap();
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let logits = Tensor::new(vec![1, 4], vec![0.3; 4]).unwrap();
        for target in 0..4 {
            let ce = cross_entropy(&logits, &[target]).unwrap();
            assert!((ce - (4.0f64).ln()).abs() <= 1e-6);
        }
    }

    #[test]
    fn cross_entropy_nonnegative_and_zero_iff_onehot() {
        // A strongly peaked row approaches zero from above.
        let logits = Tensor::new(vec![1, 3], vec![50.0, 0.0, 0.0]).unwrap();
        let ce = cross_entropy(&logits, &[0]).unwrap();
        assert!(ce >= 0.0 && ce < 1e-6);
        let miss = cross_entropy(&logits, &[1]).unwrap();
        assert!(miss > 1.0);
    }

    #[test]
    fn adam_matches_f64_reference() {
        let mut rng = DetRng::new(21);
        let n = 64;
        let p0: Vec<f32> = (0..n).map(|_| rng.normal() as f32).collect();
        let g: Vec<f32> = (0..n).map(|_| rng.normal() as f32).collect();
        let cfg = AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        };
        let mut p = p0.clone();
        let mut m = vec![0.0f32; n];
        let mut v = vec![0.0f32; n];
        for t in 1..=3 {
            adam_step(&mut p, &g, &mut m, &mut v, t, cfg).unwrap();
        }
        // Independent f64 reference.
        let mut pr: Vec<f64> = p0.iter().map(|&x| x as f64).collect();
        let mut mr = vec![0.0f64; n];
        let mut vr = vec![0.0f64; n];
        for t in 1..=3 {
            for i in 0..n {
                let gd = g[i] as f64;
                mr[i] = 0.9 * mr[i] + 0.1 * gd;
                vr[i] = 0.99 * vr[i] + 0.01 * gd * gd;
                let mhat = mr[i] / (1.0 - 0.9f64.powi(t));
                let vhat = vr[i] / (1.0 - 0.99f64.powi(t));
                pr[i] -= 1e-3 * mhat / (vhat.sqrt() + 1e-8);
            }
        }
        for i in 0..n {
            assert!((p[i] as f64 - pr[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn ops_are_bit_deterministic() {
        let mut rng = DetRng::new(5);
        let a = Tensor::randn(vec![8, 8], 1.0, &mut rng).unwrap();
        let b = Tensor::randn(vec![8, 8], 1.0, &mut rng).unwrap();
        assert!(matmul(&a, &b).unwrap().bit_eq(&matmul(&a, &b).unwrap()));
        assert!(softmax(&a, 1).unwrap().bit_eq(&softmax(&a, 1).unwrap()));
    }
}
