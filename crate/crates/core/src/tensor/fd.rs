//! Central finite differences, used as the independent gradient oracle.

use crate::error::{Error, Result};

use super::Tensor;

/// Numerically differentiate a scalar function of one tensor with central
/// differences of step `h`. The closure sees plain (untraced) tensors.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::contract(
            "finite_diff_grad",
            format!("step must be positive, got {h}"),
        ));
    }
    let base = x.data().to_vec();
    let shape = x.shape().to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::new(shape.clone(), plus)?)?;
        let fm = f(&Tensor::new(shape.clone(), minus)?)?;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(shape, grad)
}

/// Relative disagreement used when comparing analytic and numeric gradients:
/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative disagreement across two equally-shaped gradient tensors.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "max_rel_err",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max))
}
