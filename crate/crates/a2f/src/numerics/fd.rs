/// Central finite differences: `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)`
/// per coordinate. The oracle for every gradient acceptance test; always
/// double precision.
pub fn finite_difference_grad(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut x = point.to_vec();
    let mut grad = vec![0.0; point.len()];
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let hi = f(&x);
        x[i] = orig - eps;
        let lo = f(&x);
        x[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Relative error with an absolute floor so near-zero pairs compare cleanly.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Denominator floor for gradient comparisons. Coordinates whose true
/// gradient is mathematically zero (e.g. a bias that cancels inside a
/// softmax row) carry only cancellation noise in both estimates; the floor
/// makes them compare by absolute error at the same tolerance instead of
/// amplifying noise-over-noise ratios.
const GRAD_FLOOR: f64 = 1e-4;

/// Worst relative error across two gradient vectors. NaN anywhere yields
/// infinity so a corrupted gradient can never pass a tolerance check.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if !a.is_finite() || !n.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR));
    }
    worst
}
