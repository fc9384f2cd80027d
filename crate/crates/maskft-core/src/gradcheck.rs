//! Central finite-difference gradient checking.
//!
//! Given a deterministic scalar function of a tensor and an analytic
//! gradient computed elsewhere, perturbs one coordinate at a time and
//! compares `(f(x+h) - f(x-h)) / 2h` against the analytic value.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maximum over coordinates of
/// `|analytic - central_difference| / max(1, |analytic|)`.
///
/// `f` must be deterministic and finite at `x`; `h` must be positive.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64, analytic: &[f64]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step h must be positive, got {h}")));
    }
    if analytic.len() != x.numel() {
        return Err(Error::InvalidShape {
            op: "finite_difference_check",
            shape: x.shape().to_vec(),
            reason: format!("analytic gradient has {} entries", analytic.len()),
        });
    }
    let f0 = f(x)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite { op: "finite_difference_check" });
    }

    let base = x.data().to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&x.with_data(plus)?)?;
        let fm = f(&x.with_data(minus)?)?;
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn quadratic_matches_closely() {
        let x = Tensor::from_vec(vec![1.0, -1.0], &[2]).unwrap();
        let f = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.leaf(&t.clone().with_requires_grad(true));
            let sq = tape.mul(v, v)?;
            let s = tape.sum(sq)?;
            Ok(tape.scalar_value(s))
        };
        // analytic gradient of sum(x^2) is 2x
        let err = finite_difference_check(f, &x, 1e-5, &[2.0, -2.0]).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::scalar(1.0).unwrap();
        assert!(finite_difference_check(|_| Ok(0.0), &x, 0.0, &[0.0]).is_err());
    }

    #[test]
    fn rejects_non_finite_value() {
        let x = Tensor::scalar(1.0).unwrap();
        let r = finite_difference_check(|_| Ok(f64::NAN), &x, 1e-5, &[0.0]);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
