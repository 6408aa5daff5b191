//! Finite-difference utilities for verifying analytic gradients.

/// Central-difference gradient of a scalar function at `point`.
/// Error is O(h^2) for smooth f.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut grad = vec![0.0; point.len()];
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst relative disagreement between two gradients:
/// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor).
///
/// The floor keeps the measure meaningful where both gradients vanish; at
/// magnitude `floor` the comparison degrades to absolute agreement of
/// tolerance * floor, which should sit well above finite-difference noise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
