//! Finite-difference gradient checking.

use crate::error::Result;
use crate::tensor::Tensor;

/// Relative error with an absolute floor of 1e-6 in the denominator, so
/// near-zero gradient pairs compare by absolute difference instead of
/// exploding. This is the convention used by every gradient check in the
/// crate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of a scalar-valued function at `x`.
///
/// `f` receives an untracked perturbed copy of `x` and must return a
/// one-element tensor; the result has `x`'s shape. Cost is two evaluations
/// of `f` per element of `x`.
pub fn finite_diff(
    x: &Tensor,
    step: f64,
    mut f: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let base = x.to_vec();
    let mut out = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = f(&Tensor::from_vec(plus, x.shape())?)?.item()?;
        let fm = f(&Tensor::from_vec(minus, x.shape())?)?.item()?;
        out[i] = (fp - fm) / (2.0 * step);
    }
    Tensor::from_vec(out, x.shape())
}
