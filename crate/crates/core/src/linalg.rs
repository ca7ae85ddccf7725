//! Small dense symmetric-matrix kernels used node by node.
//!
//! Matrices are row-major `n*n` slices. Sizes 1 and 2 use closed forms;
//! larger ones go through nalgebra (Householder tridiagonalization plus
//! implicit QR for eigenvalues, LU for determinants).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{KrfError, Result};

/// Relative tolerance for deciding semidefiniteness: an eigenvalue counts as
/// nonnegative when it is `>= -EIGEN_TOL * ||M||`. Ties resolve toward semidefinite.
pub const EIGEN_TOL: f64 = 1e-12;

/// Relative symmetry tolerance accepted by [`det_plus`].
pub const SYMMETRY_TOL: f64 = 1e-12;

fn to_dmatrix(m: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, m)
}

pub fn max_abs(m: &[f64]) -> f64 {
    m.iter().fold(0.0, |s, v| s.max(v.abs()))
}

pub fn is_symmetric(m: &[f64], n: usize, rel_tol: f64) -> bool {
    let scale = max_abs(m);
    (0..n).all(|i| (0..i).all(|j| (m[i * n + j] - m[j * n + i]).abs() <= rel_tol * scale))
}

pub fn det(m: &[f64], n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        3 => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
        _ => to_dmatrix(m, n).determinant(),
    }
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &[f64], n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![m[0]],
        2 => {
            let (a, b, c) = (m[0], 0.5 * (m[1] + m[2]), m[3]);
            let mid = 0.5 * (a + c);
            let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            vec![mid - rad, mid + rad]
        }
        _ => {
            let mut ev: Vec<f64> = SymmetricEigen::new(to_dmatrix(m, n)).eigenvalues.iter().cloned().collect();
            ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ev
        }
    }
}

pub fn min_eigenvalue(m: &[f64], n: usize) -> f64 {
    sym_eigenvalues(m, n).first().cloned().unwrap_or(f64::INFINITY)
}

/// True when every eigenvalue is `>= -EIGEN_TOL * ||M||`.
pub fn is_psd(m: &[f64], n: usize) -> bool {
    min_eigenvalue(m, n) >= -EIGEN_TOL * max_abs(m)
}

/// Clamped determinant: `det(M)` when `M` is positive semidefinite, otherwise 0.
pub fn det_plus(m: &[f64], n: usize) -> Result<f64> {
    if m.len() != n * n {
        return Err(KrfError::Argument("matrix has wrong size".into()));
    }
    if !is_symmetric(m, n, SYMMETRY_TOL) {
        return Err(KrfError::Argument("det_plus requires a symmetric matrix".into()));
    }
    Ok(det_plus_unchecked(m, n))
}

pub(crate) fn det_plus_unchecked(m: &[f64], n: usize) -> f64 {
    let ev = sym_eigenvalues(m, n);
    if ev.first().is_none_or(|&l| l >= -EIGEN_TOL * max_abs(m)) {
        ev.iter().map(|l| l.max(0.0)).product()
    } else {
        0.0
    }
}

/// Strict positive definiteness via leading principal minors (Cholesky for `n > 3`).
pub fn is_positive_definite(m: &[f64], n: usize) -> bool {
    match n {
        0 => true,
        1 => m[0] > 0.0,
        2 => m[0] > 0.0 && det(m, 2) > 0.0,
        3 => m[0] > 0.0 && m[0] * m[4] - m[1] * m[3] > 0.0 && det(m, 3) > 0.0,
        _ => nalgebra::Cholesky::new(to_dmatrix(m, n)).is_some(),
    }
}

pub fn inverse(m: &[f64], n: usize) -> Option<Vec<f64>> {
    match n {
        1 => (m[0] != 0.0).then(|| vec![1.0 / m[0]]),
        2 => {
            let d = det(m, 2);
            (d != 0.0).then(|| vec![m[3] / d, -m[1] / d, -m[2] / d, m[0] / d])
        }
        3 => {
            let d = det(m, 3);
            (d != 0.0).then(|| {
                let c = |i: usize, j: usize| m[i * 3 + j];
                vec![
                    (c(1, 1) * c(2, 2) - c(1, 2) * c(2, 1)) / d,
                    (c(0, 2) * c(2, 1) - c(0, 1) * c(2, 2)) / d,
                    (c(0, 1) * c(1, 2) - c(0, 2) * c(1, 1)) / d,
                    (c(1, 2) * c(2, 0) - c(1, 0) * c(2, 2)) / d,
                    (c(0, 0) * c(2, 2) - c(0, 2) * c(2, 0)) / d,
                    (c(0, 2) * c(1, 0) - c(0, 0) * c(1, 2)) / d,
                    (c(1, 0) * c(2, 1) - c(1, 1) * c(2, 0)) / d,
                    (c(0, 1) * c(2, 0) - c(0, 0) * c(2, 1)) / d,
                    (c(0, 0) * c(1, 1) - c(0, 1) * c(1, 0)) / d,
                ]
            })
        }
        _ => to_dmatrix(m, n)
            .try_inverse()
            .map(|inv| inv.transpose().as_slice().to_vec()),
    }
}

/// Coefficients `c_0..=c_n` of the polynomial `s -> det(s X + Y)`.
///
/// Uses column multilinearity: `c_j` is the sum over column subsets of size
/// `j` of determinants taking those columns from `X` and the rest from `Y`.
/// `c_j = C(n, j) D_j(X, Y)` with `D_j` the mixed discriminant.
pub fn mixed_coefficients(x: &[f64], y: &[f64], n: usize) -> Vec<f64> {
    let mut coeffs = vec![0.0; n + 1];
    let mut buf = vec![0.0; n * n];
    for mask in 0u32..(1u32 << n) {
        for i in 0..n {
            for j in 0..n {
                buf[i * n + j] = if mask & (1 << j) != 0 { x[i * n + j] } else { y[i * n + j] };
            }
        }
        coeffs[mask.count_ones() as usize] += det(&buf, n);
    }
    coeffs
}

/// Eigenvalues of the pencil `(B, A)`: the `λ` with `B v = λ A v`, for `A`
/// positive definite. Returns `None` if `A` is not positive definite.
pub fn generalized_eigenvalues(b: &[f64], a: &[f64], n: usize) -> Option<Vec<f64>> {
    let chol = nalgebra::Cholesky::new(to_dmatrix(a, n))?;
    let l = chol.l();
    let linv = l.try_inverse()?;
    let bm = to_dmatrix(b, n);
    let mut c = &linv * bm * linv.transpose();
    c = 0.5 * (&c + c.transpose());
    Some(sym_eigenvalues(c.transpose().as_slice(), n))
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
