//! Central-difference gradient oracle.
//!
//! Independent of the tape by construction: it only re-evaluates a closure
//! at perturbed parameter values, so agreement between the two is evidence,
//! not circularity. Checks run in `f64`, where a step of `1e-5` leaves
//! roughly ten digits of headroom between truncation and rounding error.

/// Default perturbation for `f64` checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative-error floor: gradients this small are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Central finite differences of `f` at `params`.
///
/// Returns one gradient vector per parameter vector:
/// `g[p][i] = (f(..params[p][i]+h..) - f(..params[p][i]-h..)) / (2h)`.
pub fn finite_diff_grad<F>(mut f: F, params: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut work: Vec<Vec<f64>> = params.to_vec();
    let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = work[p][i];
            work[p][i] = orig + h;
            let up = f(&work);
            work[p][i] = orig - h;
            let down = f(&work);
            work[p][i] = orig;
            grads[p][i] = (up - down) / (2.0 * h);
        }
    }
    grads
}

/// Worst relative error between an analytic gradient and the oracle,
/// `|a - n| / max(|a|, |n|, REL_FLOOR)`, over all elements.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(REL_FLOOR);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_matches_quadratic() {
        // f(x, y) = sum(x^2) + 3*sum(y) ; df/dx_i = 2 x_i ; df/dy_j = 3
        let params = vec![vec![1.0, -2.0, 0.5], vec![4.0, 0.0]];
        let g = finite_diff_grad(
            |p| p[0].iter().map(|x| x * x).sum::<f64>() + 3.0 * p[1].iter().sum::<f64>(),
            &params,
            DEFAULT_STEP,
        );
        assert!(max_rel_err(&[2.0, -4.0, 1.0], &g[0]) < 1e-8);
        assert!(max_rel_err(&[3.0, 3.0], &g[1]) < 1e-8);
    }

    #[test]
    fn oracle_leaves_params_unchanged() {
        let params = vec![vec![0.3, 0.7]];
        let before = params.clone();
        let _ = finite_diff_grad(|p| p[0][0] * p[0][1], &params, DEFAULT_STEP);
        assert_eq!(params, before);
    }
}
