//! Central finite differences, used as an independent oracle for the tape.

use super::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Floor on the denominator of [`relative_error`], so that gradients which
/// are zero up to rounding compare by absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

/// Numerical gradient of `f` at `x` by central differences.
pub fn numerical_gradient(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    out
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest elementwise [`relative_error`] between two tensors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}
