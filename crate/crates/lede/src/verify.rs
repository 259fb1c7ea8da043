//! Numerical gradient checking.
//!
//! The oracle here never touches the reverse sweep: it re-runs a scalar
//! forward closure with each input coordinate nudged by `step` in both
//! directions and takes the central difference. Tests freeze analytic
//! gradients against this.

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn finite_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut pert = x.to_vec();
    for i in 0..x.len() {
        pert[i] = x[i] + step;
        let hi = f(&pert);
        pert[i] = x[i] - step;
        let lo = f(&pert);
        pert[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// `max_i |a_i - b_i| / max(1, |a_i|, |b_i|)`; the `1` floor keeps tiny
/// gradients from inflating the ratio.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / 1.0f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}
