// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central-difference gradient checking.

use crate::error::{FvError, Result};
use crate::math::tape::{NodeId, Tape};
use crate::math::tensor::Tensor;

/// Check the tape gradient of a scalar-valued function against central
/// differences. `f` builds the function on a fresh tape from the input node;
/// it must return a scalar node.
///
/// Returns `max_i |analytic_i - central_i| / max(1, |central_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(FvError::invalid(format!(
            "grad_check eps {eps} outside [1e-5, 1e-2]"
        )));
    }

    // Analytic gradient.
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone().with_grad());
    let out = f(&mut tape, xid)?;
    if tape.value(out).len() != 1 {
        return Err(FvError::invalid(format!(
            "grad_check target is non-scalar: shape {:?}",
            tape.value(out).shape()
        )));
    }
    let grads = tape.backward(out, 1.0)?;
    let analytic: Vec<f32> = match grads.get(xid) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.len()],
    };

    let eval = |point: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.leaf(point.clone());
        let o = f(&mut t, id)?;
        t.scalar_f64(o)
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let base = x.data()[i];
        let xp = (base as f64 + eps) as f32;
        let xm = (base as f64 - eps) as f32;
        let mut dp = x.data().to_vec();
        dp[i] = xp;
        let mut dm = x.data().to_vec();
        dm[i] = xm;
        let fp = eval(&Tensor::new(x.shape().to_vec(), dp)?)?;
        let fm = eval(&Tensor::new(x.shape().to_vec(), dm)?)?;
        // Use the step the f32 perturbation actually achieved.
        let h = xp as f64 - xm as f64;
        let central = (fp - fm) / h;
        let rel = (analytic[i] as f64 - central).abs() / central.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng::DetRng;

    #[test]
    fn sum_of_squares_closed_form() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum_all(sq)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn constant_function_zero_error() {
        let x = Tensor::new(vec![3], vec![0.5, -0.5, 2.0]).unwrap();
        let err = grad_check(
            |t, _| {
                let c = t.leaf(Tensor::scalar(3.0)?);
                t.scale(c, 1.0)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn eps_bounds_enforced() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(grad_check(|t, x| t.sum_all(x), &x, 1e-6).is_err());
        assert!(grad_check(|t, x| t.sum_all(x), &x, 0.5).is_err());
    }

    #[test]
    fn non_scalar_target_rejected() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|t, x| t.mul(x, x), &x, 1e-3).unwrap_err();
        assert!(matches!(err, FvError::Invalid(_)));
    }

    /// Every differentiable tape op, checked on small random inputs.
    #[test]
    fn per_op_gradients_under_1e_3() {
        for seed in 0..20u64 {
            let mut rng = DetRng::new(seed);
            let v = Tensor::randn(vec![4, 4], 0.8, &mut rng).unwrap();
            let w = Tensor::randn(vec![4, 4], 0.8, &mut rng).unwrap();
            let gamma = Tensor::randn(vec![4], 0.3, &mut rng).unwrap();
            let cases: Vec<(&str, Box<dyn Fn(&mut Tape, NodeId) -> Result<NodeId>>)> = vec![
                ("add", {
                    let w = w.clone();
                    Box::new(move |t, x| {
                        let wid = t.leaf(w.clone());
                        let y = t.add(x, wid)?;
                        let sq = t.mul(y, y)?;
                        t.sum_all(sq)
                    })
                }),
                ("mul", {
                    let w = w.clone();
                    Box::new(move |t, x| {
                        let wid = t.leaf(w.clone());
                        let y = t.mul(x, wid)?;
                        t.sum_all(y)
                    })
                }),
                ("scale", Box::new(|t, x| {
                    let y = t.scale(x, -1.7)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                })),
                ("matmul", {
                    let w = w.clone();
                    Box::new(move |t, x| {
                        let wid = t.leaf(w.clone());
                        let y = t.matmul(x, wid)?;
                        let sq = t.mul(y, y)?;
                        t.sum_all(sq)
                    })
                }),
                ("matmul_tb", {
                    let w = w.clone();
                    Box::new(move |t, x| {
                        let wid = t.leaf(w.clone());
                        let y = t.matmul_tb(x, wid)?;
                        let sq = t.mul(y, y)?;
                        t.sum_all(sq)
                    })
                }),
                ("softmax_rows", Box::new(|t, x| {
                    let y = t.softmax_rows(x)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                })),
                ("causal_softmax", Box::new(|t, x| {
                    let y = t.causal_softmax(x)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                })),
                ("layer_norm", {
                    let gamma = gamma.clone();
                    Box::new(move |t, x| {
                        let g = t.leaf(gamma.clone());
                        let b = t.leaf(Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0])?);
                        let y = t.layer_norm(x, g, b, 1e-5)?;
                        let sq = t.mul(y, y)?;
                        t.sum_all(sq)
                    })
                }),
                ("gelu", Box::new(|t, x| {
                    let y = t.gelu(x)?;
                    t.sum_all(y)
                })),
                ("slice_and_rows", Box::new(|t, x| {
                    let a = t.slice_cols(x, 1, 2)?;
                    let b = t.slice_rows(x, 0, 2)?;
                    let sa = t.sum_all(a)?;
                    let sb = t.sum_all(b)?;
                    let sb2 = t.mul(sa, sb)?;
                    t.scale(sb2, 1.0)
                })),
                ("pick_rows", Box::new(|t, x| {
                    let y = t.pick_rows(x, &[0, 2, 3])?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                })),
                ("ce_sum", Box::new(|t, x| t.ce_sum(x, &[0, 3, 1, 2]))),
                ("add_at_rows", Box::new(|t, x| {
                    let shift = Tensor::new(vec![4], vec![0.5, -0.5, 0.25, 0.1])?;
                    let y = t.add_at_rows(x, &shift, RowSel::All, 0.7)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                })),
                ("project_out_rows", Box::new(|t, x| {
                    let u = Tensor::new(vec![4], vec![0.5, 0.5, 0.5, 0.5])?;
                    let y = t.project_out_rows(x, &u)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                })),
            ];
            for (name, f) in cases {
                let err = grad_check(f.as_ref(), &v, 1e-3).unwrap();
                assert!(err <= 1e-3, "op {name} seed {seed}: rel err {err}");
            }
        }
    }

    /// Gather differentiates w.r.t. the table it reads from.
    #[test]
    fn gather_gradient() {
        let mut rng = DetRng::new(404);
        let table = Tensor::randn(vec![5, 3], 1.0, &mut rng).unwrap();
        let err = grad_check(
            |t, tab| {
                let y = t.gather(tab, &[0, 4, 0, 2])?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            },
            &table,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "rel err {err}");
    }
}
