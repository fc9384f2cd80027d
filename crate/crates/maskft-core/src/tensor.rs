//! Dense row-major f64 tensors.
//!
//! Values are immutable after creation; gradient buffers live on the
//! [`Tape`](crate::tape::Tape) nodes, not here. Everything is 64-bit so
//! numerical precision never muddies a gradient check.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Immutable dense tensor: shape plus flat row-major data.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from flat data. Rejects shape/data length mismatch
    /// and non-finite entries.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape holds {numel} elements but data has {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    /// Scalar wrapper (shape `[1]`).
    pub fn scalar(v: f64) -> Result<Self> {
        Self::from_vec(vec![v], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
            requires_grad: false,
        }
    }

    /// Seeded normal init with standard deviation `std`.
    pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(vec![v; numel], shape)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Same data buffer, new value for `requires_grad`.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
        }
    }

    /// Replaces the data buffer, keeping shape and flags. Used by optimizers
    /// to produce the post-step tensor.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.numel() {
            return Err(Error::InvalidShape {
                op: "with_data",
                shape: self.shape.clone(),
                reason: format!("replacement has {} elements", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "with_data" });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            requires_grad: self.requires_grad,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// L2 norm of a flat slice.
pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).unwrap_err();
        assert!(matches!(err, Error::InvalidShape { .. }));
    }

    #[test]
    fn from_vec_rejects_nan() {
        let err = Tensor::from_vec(vec![1.0, f64::NAN], &[2]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn randn_is_seeded() {
        use rand::SeedableRng;
        let a = Tensor::randn(&mut rand_chacha::ChaCha8Rng::seed_from_u64(7), &[4, 4], 0.02);
        let b = Tensor::randn(&mut rand_chacha::ChaCha8Rng::seed_from_u64(7), &[4, 4], 0.02);
        assert!(a.bit_eq(&b));
    }
}
