//! Finite-difference gradient checking.
//!
//! Test-support module: the numeric gradients here come from central
//! differences of the forward pass alone, independent of the backward
//! implementations they vet.

/// Central-difference gradient of `loss` at `x`, perturbing one coordinate at
/// a time with a relative step `eps_rel * max(1, |x_i|)`.
pub fn finite_diff_grad(loss: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps_rel: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let eps = eps_rel * x[i].abs().max(1.0);
        probe[i] = x[i] + eps;
        let hi = loss(&probe);
        probe[i] = x[i] - eps;
        let lo = loss(&probe);
        probe[i] = x[i];
        grad.push((hi - lo) / (2.0 * eps));
    }
    grad
}

/// Worst relative disagreement between analytic and numeric gradients, with
/// a floor so near-zero entries compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}
