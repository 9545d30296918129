//! Finite-difference gradient checking.
//!
//! Central differences with a fixed step: the truncation error is O(step^2)
//! and the rounding error O(eps/step), so step = 1e-5 balances both near
//! sqrt(f64 eps) for O(1) functions. Tests compare whole gradient vectors
//! through [`relative_error`] rather than per-coordinate ratios, which
//! avoids blowups at coordinates that are incidentally zero.

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `at`.
pub fn numerical_gradient<F>(mut f: F, at: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = at.to_vec();
    let mut g = vec![0.0; at.len()];
    for i in 0..at.len() {
        let xi = x[i];
        x[i] = xi + step;
        let fp = f(&x);
        x[i] = xi - step;
        let fm = f(&x);
        x[i] = xi;
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Directional derivative of `f` at `at` along `dir` by central differences.
/// Cheaper than a full gradient when only a projection is needed.
pub fn directional_derivative<F>(mut f: F, at: &[f64], dir: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(at.len(), dir.len());
    let shift = |s: f64| -> Vec<f64> {
        at.iter().zip(dir).map(|(a, d)| a + s * d).collect()
    };
    (f(&shift(step)) - f(&shift(-step))) / (2.0 * step)
}

/// Euclidean-norm relative error between two vectors:
/// `||a - b|| / max(||a||, ||b||, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

/// Scalar relative error with the same floor.
pub fn scalar_relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
