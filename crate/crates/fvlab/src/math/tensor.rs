// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major f32 tensors.
//!
//! Storage is 32-bit; every kernel computes in f64 internally and rounds to
//! f32 exactly once at its output. That single-rounding discipline is what the
//! decomposition and mean-output invariants elsewhere in the crate rely on:
//! two structurally different evaluations of the same expression land on the
//! same bits as long as they share the rounding points.
//!
//! Tensors are immutable values after construction; `Clone` is a cheap
//! refcount bump.

use std::sync::Arc;

use crate::error::{FvError, Result};

/// Dense row-major tensor of 32-bit reals.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

impl Tensor {
    /// Build a tensor, validating the shape/length contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(FvError::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(FvError::shape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        let t = Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        };
        t.validate_finite("Tensor::new")?;
        Ok(t)
    }

    /// Internal constructor for kernel outputs; still enforces finiteness.
    pub(crate) fn from_kernel(shape: Vec<usize>, data: Vec<f32>, op: &'static str) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let t = Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        };
        t.validate_finite(op)?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
            requires_grad: false,
        }
    }

    pub fn scalar(v: f32) -> Result<Self> {
        Tensor::new(vec![], vec![v])
    }

    /// Standard-normal entries scaled by `std`, drawn from `rng`.
    pub fn randn(shape: Vec<usize>, std: f32, rng: &mut crate::math::rng::DetRng) -> Result<Self> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| (rng.normal() * std as f64) as f32).collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Copy-on-write mutable access. Only the optimizer and gradient
    /// accumulation use this; tensors handed out elsewhere stay frozen.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Scalar value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(FvError::shape(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(FvError::shape(format!("expected rank 2, got {s:?}"))),
        }
    }

    /// Borrow row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> Result<&[f32]> {
        let (r, c) = self.dims2()?;
        if i >= r {
            return Err(FvError::shape(format!("row {i} out of {r}")));
        }
        Ok(&self.data[i * c..(i + 1) * c])
    }

    /// Row `i` as an owned rank-1 tensor.
    pub fn row_tensor(&self, i: usize) -> Result<Tensor> {
        let row = self.row(i)?.to_vec();
        Tensor::new(vec![row.len()], row)
    }

    pub fn validate_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(index) => Err(FvError::NonFinite { op, index }),
        }
    }

    /// Euclidean norm with 64-bit accumulation.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(FvError::shape(format!(
                "max_abs_diff shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| ((a as f64) - (b as f64)).abs())
            .fold(0.0, f64::max))
    }

    /// Exact bitwise equality of shape and payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng::DetRng;

    #[test]
    fn shape_length_contract() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn non_finite_rejected() {
        let err = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, FvError::NonFinite { index: 1, .. }));
        assert!(Tensor::new(vec![1], vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn randn_deterministic() {
        let mut a = DetRng::new(7);
        let mut b = DetRng::new(7);
        let x = Tensor::randn(vec![4, 4], 0.5, &mut a).unwrap();
        let y = Tensor::randn(vec![4, 4], 0.5, &mut b).unwrap();
        assert!(x.bit_eq(&y));
    }

    #[test]
    fn cheap_clone_is_frozen() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut u = t.clone();
        u.data_mut()[0] = 9.0;
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(u.data()[0], 9.0);
    }
}
