//! Central finite differences, the numerical oracle for every autodiff test.
//!
//! This module never touches the graph machinery: it only evaluates a
//! caller-supplied scalar function, so it stays independent of the
//! implementation path it is used to check.

use super::{Element, Tensor};
use crate::error::Result;

/// Gradient of a scalar function by central differences with a fixed step:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_difference_grad<E: Element>(
    f: &mut dyn FnMut(&Tensor<E>) -> Result<f64>,
    x: &Tensor<E>,
    h: f64,
) -> Result<Tensor<E>> {
    debug_assert!(h > 0.0, "step must be positive");
    let mut probe = x.clone();
    let mut grad = vec![E::ZERO; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let step = E::from_f64(h);
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = E::from_f64((plus - minus) / (2.0 * h));
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}

/// Like [`finite_difference_grad`] but with a per-coordinate step
/// `h_i = base * (1 + |x_i|)`, which keeps the relative truncation error
/// flat across magnitudes. The gradient-check suites use this variant.
pub fn finite_difference_grad_scaled<E: Element>(
    f: &mut dyn FnMut(&Tensor<E>) -> Result<f64>,
    x: &Tensor<E>,
    base: f64,
) -> Result<Tensor<E>> {
    debug_assert!(base > 0.0, "step must be positive");
    let mut probe = x.clone();
    let mut grad = vec![E::ZERO; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let h = base * (1.0 + orig.to_f64().abs());
        let step = E::from_f64(h);
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = E::from_f64((plus - minus) / (2.0 * h));
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}

/// Worst per-coordinate relative error between two gradients.
/// The denominator is floored so near-zero entries compare absolutely.
pub fn max_rel_err<E: Element>(analytic: &Tensor<E>, numeric: &Tensor<E>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let (a, n) = (a.to_f64(), n.to_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
        })
        .fold(0.0, f64::max)
}

/// Largest coordinate discrepancy relative to the gradient's own scale.
///
/// On coordinates whose true derivative is near zero, central differences
/// return pure rounding noise; dividing by the vector's max magnitude
/// keeps that noise from masquerading as gradient error while still
/// exposing any real defect, which perturbs coordinates at full scale.
pub fn rel_err_normwise<E: Element>(analytic: &Tensor<E>, numeric: &Tensor<E>) -> f64 {
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .map(|v| v.to_f64().abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a.to_f64() - n.to_f64()).abs())
        .fold(0.0, f64::max)
        / scale
}
