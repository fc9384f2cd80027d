//! First-order optimizers with per-path moment buffers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl Default for OptimKind {
    fn default() -> Self {
        OptimKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state: step count plus moment buffers keyed by parameter path.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimKind,
    lr: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64) -> Result<Self> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidConfig(format!("learning rate must be >= 0, got {lr}")));
        }
        Ok(Optimizer { kind, lr, step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Starts a new optimization step (bias-correction counter).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Returns the post-update tensor for one parameter. Must be called
    /// after [`Optimizer::begin_step`].
    pub fn update(&mut self, path: &str, param: &Tensor, grad: &[f64]) -> Result<Tensor> {
        if grad.len() != param.numel() {
            return Err(Error::ShapeMismatch {
                op: "optimizer_update",
                lhs: param.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        debug_assert!(self.step > 0, "begin_step before update");
        let n = param.numel();
        let mut out = param.data().to_vec();
        match self.kind {
            OptimKind::Adam { beta1, beta2, eps } => {
                let m = self.m.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
                let v = self.v.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for i in 0..n {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    out[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            OptimKind::SgdMomentum { momentum } => {
                let m = self.m.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
                for i in 0..n {
                    m[i] = momentum * m[i] + grad[i];
                    out[i] -= self.lr * m[i];
                }
            }
        }
        param.with_data(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut opt = Optimizer::new(OptimKind::default(), 0.0).unwrap();
        let p = Tensor::from_vec(vec![1.0, -2.0, 3.5], &[3]).unwrap();
        opt.begin_step();
        let p2 = opt.update("w", &p, &[0.3, -0.1, 4.0]).unwrap();
        assert!(p.bit_eq(&p2));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut opt = Optimizer::new(OptimKind::default(), 0.1).unwrap();
        let p = Tensor::from_vec(vec![1.0], &[1]).unwrap();
        opt.begin_step();
        let p2 = opt.update("w", &p, &[1.0]).unwrap();
        assert!(p2.data()[0] < 1.0);
    }

    #[test]
    fn determinism() {
        let run = || {
            let mut opt = Optimizer::new(OptimKind::default(), 1e-2).unwrap();
            let mut p = Tensor::from_vec(vec![0.5, -0.5], &[2]).unwrap();
            for s in 0..10 {
                opt.begin_step();
                p = opt.update("w", &p, &[0.1 * s as f64, -0.2]).unwrap();
            }
            p.data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
