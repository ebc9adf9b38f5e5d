//! Finite-difference oracles: Jacobians, gradients and log-determinants.

use nalgebra::DMatrix;

/// Central-difference Jacobian of `f` at `x`: entry `(r, c)` is
/// `∂f_r / ∂x_c`.
pub fn jacobian_fd(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], eps: f64) -> DMatrix<f64> {
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    let mut xp = x.to_vec();
    for c in 0..x.len() {
        xp[c] = x[c] + eps;
        let hi = f(&xp);
        xp[c] = x[c] - eps;
        let lo = f(&xp);
        xp[c] = x[c];
        for r in 0..m {
            jac[(r, c)] = (hi[r] - lo[r]) / (2.0 * eps);
        }
    }
    jac
}

/// Central-difference gradient of a scalar function.
pub fn gradient_fd(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|c| {
            xp[c] = x[c] + eps;
            let hi = f(&xp);
            xp[c] = x[c] - eps;
            let lo = f(&xp);
            xp[c] = x[c];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// `log |det A|` from an LU factorization with partial pivoting.
pub fn log_abs_det(a: &DMatrix<f64>) -> f64 {
    assert!(a.is_square(), "determinant of a non-square matrix");
    let lu = a.clone().lu();
    lu.u().diagonal().iter().map(|d| d.abs().ln()).sum()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest entry strictly above the diagonal, in magnitude.
pub fn max_upper(a: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..a.nrows() {
        for c in r + 1..a.ncols() {
            worst = worst.max(a[(r, c)].abs());
        }
    }
    worst
}
