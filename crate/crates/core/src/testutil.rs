//! Shared helpers for unit tests: the central-difference oracle used to
//! validate every backward rule.

/// Central finite differences: grad_i ~ (f(x + eps e_i) - f(x - eps e_i)) / 2 eps.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Relative comparison on every coordinate whose analytic magnitude exceeds
/// `floor`; coordinates below the floor are only required to stay near zero
/// numerically.
pub fn assert_grad_close(analytic: &[f64], numeric: &[f64], rel_tol: f64, floor: f64) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        if a.abs() > floor {
            let rel = (a - n).abs() / a.abs().max(n.abs());
            assert!(
                rel <= rel_tol,
                "gradient mismatch at coord {i}: analytic {a}, numeric {n}, rel err {rel:.3e}"
            );
        }
    }
}
