//! Finite-difference gradient checking utilities.
//!
//! These are the independent oracle for every analytic gradient in the
//! crate: they only ever call the forward path.

/// Central finite difference of a scalar function at `x0`, one coordinate
/// at a time.
pub fn central_diff(mut value: impl FnMut(&[f64]) -> f64, x0: &[f64], step: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x0.len());
    let mut work = x0.to_vec();
    for i in 0..x0.len() {
        work[i] = x0[i] + step;
        let hi = value(&work);
        work[i] = x0[i] - step;
        let lo = value(&work);
        work[i] = x0[i];
        out.push((hi - lo) / (2.0 * step));
    }
    out
}

/// Relative error with a small floor so near-zero pairs compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Maximum relative error between an analytic gradient and central
/// differences of `value` at `x0`.
pub fn max_rel_err(
    value: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    x0: &[f64],
    step: f64,
) -> f64 {
    let fd = central_diff(value, x0, step);
    assert_eq!(fd.len(), analytic.len());
    fd.iter()
        .zip(analytic)
        .map(|(&f, &a)| rel_err(f, a))
        .fold(0.0, f64::max)
}
