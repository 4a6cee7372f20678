//! Central finite-difference gradient checker.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`, with
/// `numeric` the central difference `(f(p + h) - f(p - h)) / 2h`.
pub fn grad_check<F>(mut f: F, analytic: &[f64], point: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(Error::Dimension {
            op: "grad_check",
            left: (analytic.len(), 1),
            right: (point.len(), 1),
        });
    }
    let mut p = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() || !analytic[i].is_finite() {
            return Err(Error::numeric(format!(
                "non-finite value while checking coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Scalar probe `Σ y ⊙ r`, which turns a tensor-valued op into a loss whose
/// gradient with respect to `y` is `r`.
pub fn probe<T: Scalar>(y: &Tensor<T>, r: &Tensor<T>) -> f64 {
    y.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a.as_f64() * b.as_f64())
        .sum()
}
