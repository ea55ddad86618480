//! Central finite differences for checking analytic gradients.

use super::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `∂f/∂x` by `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.values_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.values_mut()[i] = orig;
        grad.values_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Largest elementwise [`relative_error`] between two tensors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .values()
        .iter()
        .zip(numeric.values())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}
