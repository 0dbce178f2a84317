//! Dense row-major tensors and the reverse-mode tape.
//!
//! [`Tensor`] is a plain value type: shape, contiguous data, a
//! `requires_grad` flag, and an optional gradient buffer of identical shape.
//! It holds parameters between steps and is `Send` (no tape attached).
//! Differentiable computation happens on a [`Tape`](tape::Tape), rebuilt per
//! forward pass; see the `tape` module.

pub mod kernels;
pub mod tape;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

fn numel_of(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::shape("tensor", shape, &[]));
    }
    Ok(shape.iter().product())
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n = numel_of(&shape)?;
        if n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = numel_of(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![S::zero(); n],
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init with the given std, deterministic for a given seed.
    pub fn randn(shape: Vec<usize>, std: f64, seed: u64) -> Result<Self> {
        let n = numel_of(&shape)?;
        let mut rng = rng::rng_from(seed);
        Ok(Tensor {
            shape,
            data: rng::gaussian(n, std, &mut rng),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, v: bool) {
        self.requires_grad = v;
        if !v {
            self.grad = None;
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<S>) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("set_grad", &self.shape, &[g.len()]));
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rows of a 2-D tensor (also accepts 1-D as a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element type; used when comparing f32 runs in f64 statistics.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Value-level matrix product (no gradient recording).
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = mat_dims(self, "matmul")?;
        let (k2, n) = mat_dims(rhs, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        Tensor::from_vec(vec![m, n], kernels::matmul(&self.data, &rhs.data, m, k, n))
    }

    pub fn transpose(&self) -> Result<Tensor<S>> {
        let (r, c) = mat_dims(self, "transpose")?;
        Tensor::from_vec(vec![c, r], kernels::transpose(&self.data, r, c))
    }

    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape != rhs.shape {
            return Err(Error::shape("add", &self.shape, &rhs.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::from_vec(self.shape.clone(), data)
    }
}

pub(crate) fn mat_dims<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, other, &[])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::<f32>::randn(vec![4, 3], 0.02, 7).unwrap();
        let b = Tensor::<f32>::randn(vec![4, 3], 0.02, 7).unwrap();
        assert_eq!(a.data(), b.data());
        let c = Tensor::<f32>::randn(vec![4, 3], 0.02, 8).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn value_matmul_identity() {
        let eye = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::<f64>::from_vec(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let out = eye.matmul(&v).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);
    }

    #[test]
    fn value_matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(vec![4, 5]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }
}
