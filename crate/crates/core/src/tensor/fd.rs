//! Central finite differences, used throughout the test suites to check
//! analytic gradients.

/// Central-difference gradient of `f` at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        buf[i] = x[i] + h;
        let fp = f(&buf);
        buf[i] = x[i] - h;
        let fm = f(&buf);
        buf[i] = x[i];
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Max over components of |a - n| / max(|a|, |n|, 1e-3). The floor keeps
/// finite-difference roundoff on near-zero components from reading as a huge
/// relative error.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
