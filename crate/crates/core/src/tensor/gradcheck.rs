//! Finite-difference gradient oracle.
//!
//! Central differences re-evaluate the forward function at perturbed inputs
//! and never touch the backward pass, so they stay an independent check of
//! the tape's analytic gradients.

use crate::error::Result;

/// Default perturbation for central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Central finite-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe)?;
        probe[i] = orig - h;
        let fm = f(&probe)?;
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst relative error between analytic and numeric gradients, normalized
/// by `max(1, |a|, |n|)` so near-zero components compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Compare an analytic gradient against central differences of `f` at `x`.
/// Returns the worst relative error.
pub fn check_gradient<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let numeric = finite_diff_grad(f, x, h)?;
    Ok(max_rel_err(analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        // f(x) = sum(x^2), grad = 2x
        let x = [0.3, -1.2, 2.5];
        let f = |v: &[f64]| Ok(v.iter().map(|a| a * a).sum());
        let numeric = finite_diff_grad(f, &x, DEFAULT_H).unwrap();
        let analytic: Vec<f64> = x.iter().map(|a| 2.0 * a).collect();
        assert!(max_rel_err(&analytic, &numeric) < 1e-9);
    }

    #[test]
    fn rel_err_detects_wrong_gradient() {
        let x = [1.0, 2.0];
        let f = |v: &[f64]| Ok(v.iter().map(|a| a * a).sum());
        let wrong = [2.0, 3.0]; // second component off by 1
        let err = check_gradient(f, &x, &wrong, DEFAULT_H).unwrap();
        assert!(err > 0.1);
    }
}
