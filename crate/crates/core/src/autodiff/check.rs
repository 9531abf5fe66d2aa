//! Finite-difference gradient checks.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Central-difference estimate of the gradient of `f` at `x0`:
/// `(f(x0 + eps e_i) - f(x0 - eps e_i)) / (2 eps)` for every coordinate.
pub fn finite_difference_oracle<T, F>(mut f: F, x0: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(eps > T::zero()) {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let mut probe = x0.clone();
    let mut grad = Vec::with_capacity(x0.len());
    let two = T::one() + T::one();
    for i in 0..x0.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_oracle",
                node: i,
            });
        }
        grad.push((up - down) / (two * eps));
    }
    Tensor::new(x0.shape().to_vec(), grad)
}

/// Disagreement between an analytic and a numeric value: `|a - n|`
/// relative to `max(|a|, |n|)`, or 0 when the absolute gap is below
/// `abs_floor`.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let gap = (analytic - numeric).abs();
    if gap <= abs_floor {
        return 0.0;
    }
    gap / analytic.abs().max(numeric.abs())
}

/// Largest [`relative_error`] over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, abs_floor))
        .fold(0.0, f64::max)
}
