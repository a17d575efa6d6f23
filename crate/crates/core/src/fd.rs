//! Central-difference gradient estimation.
//!
//! The independent oracle the gradient tests check analytic gradients
//! against. Lives in the library (not test code) so integration suites and
//! downstream users can re-run the checks.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Default step for f64 central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Estimates `df/dx` per element of `x` with central differences:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`. `f` must be pure and
/// deterministic.
pub fn finite_difference_gradient<S: Scalar>(
    mut f: impl FnMut(&Tensor<S>) -> S,
    x: &Tensor<S>,
    h: f64,
) -> Result<Tensor<S>> {
    if h <= 0.0 {
        return Err(Error::InvalidDimension {
            op: "finite_difference",
            detail: format!("step must be positive, got {h}"),
        });
    }
    let step = S::from_f64(h);
    let inv_two_h = S::from_f64(1.0 / (2.0 * h));
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference",
                detail: format!("f evaluated non-finite near element {i}"),
            });
        }
        grad.data_mut()[i] = (plus - minus) * inv_two_h;
    }
    Ok(grad)
}

/// Worst-case per-element relative error between two gradients, with an
/// absolute floor below which differences are compared absolutely.
pub fn max_rel_err<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    let mut worst = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.to_f64(), y.to_f64());
        let denom = x.abs().max(y.abs()).max(floor);
        let err = (x - y).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}
