//! Small dense-matrix helpers used throughout the solvers.

use nalgebra::{DMatrix, DVector};

/// Symmetric part `(M + M^T) / 2`.
pub fn sym_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    symmetrize(&mut s);
    s
}

/// In-place symmetrization `(M + M^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest absolute entry of `M - M^T`.
pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// True when every entry is finite.
pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let eig = sym_part(m).symmetric_eigenvalues();
    eig.iter().fold(f64::INFINITY, |acc, &x| acc.min(x))
}

/// Inverse of a symmetric positive-definite matrix together with its
/// smallest eigenvalue. Returns `None` when the matrix is not PD within
/// the eigenvalue floor used by the caller.
pub fn spd_inverse(m: &DMatrix<f64>) -> (f64, Option<DMatrix<f64>>) {
    let min_eig = min_symmetric_eigenvalue(m);
    let inv = nalgebra::Cholesky::new(sym_part(m)).map(|c| c.inverse());
    (min_eig, inv)
}

/// Induced 1-norm (maximum absolute column sum).
pub fn one_norm(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..m.ncols() {
        let s: f64 = m.column(j).iter().map(|x| x.abs()).sum();
        worst = worst.max(s);
    }
    worst
}

/// General inverse with a reciprocal-condition estimate
/// `rcond = 1 / (|A|_1 * |A^{-1}|_1)`. Returns `(0, None)` when the LU
/// factorization fails outright.
pub fn inverse_with_rcond(m: &DMatrix<f64>) -> (f64, Option<DMatrix<f64>>) {
    let norm_a = one_norm(m);
    match m.clone().lu().try_inverse() {
        Some(inv) => {
            let norm_inv = one_norm(&inv);
            let rcond = if norm_a > 0.0 && norm_inv > 0.0 {
                1.0 / (norm_a * norm_inv)
            } else {
                // zero matrix edge: an all-zero 0-norm only happens for n=0
                1.0
            };
            (rcond, Some(inv))
        }
        None => (0.0, None),
    }
}

/// `[[a, 0], [0, b]]` with square blocks of equal size.
pub fn block_diag2(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(a);
    out.view_mut((n, n), (n, n)).copy_from(b);
    out
}

/// `[[0, a], [b, 0]]` with square blocks of equal size.
pub fn block_antidiag2(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, n), (n, n)).copy_from(a);
    out.view_mut((n, 0), (n, n)).copy_from(b);
    out
}

/// `[a; 0]`: an `n x m` block stacked over an `n x m` zero block.
pub fn stack_over_zero(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = a.shape();
    let mut out = DMatrix::zeros(2 * n, m);
    out.view_mut((0, 0), (n, m)).copy_from(a);
    out
}

/// `[0, a]`: an `m x n` zero block followed by an `m x n` block.
pub fn pad_left_zero(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let mut out = DMatrix::zeros(m, 2 * n);
    out.view_mut((0, n), (m, n)).copy_from(a);
    out
}

/// `[a, 0]`: an `m x n` block followed by an `m x n` zero block.
pub fn pad_right_zero(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let mut out = DMatrix::zeros(m, 2 * n);
    out.view_mut((0, 0), (m, n)).copy_from(a);
    out
}

/// Upper-left `n x n` block of a `2n x 2n` matrix.
pub fn block11(m: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    m.view((0, 0), (n, n)).into_owned()
}

/// Upper half of a `2n` vector.
pub fn upper_half(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len() / 2;
    v.rows(0, n).into_owned()
}

/// Lower half of a `2n` vector.
pub fn lower_half(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len() / 2;
    v.rows(n, n).into_owned()
}

/// Largest absolute entry of the difference of two equal-shaped matrices.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Quadratic form `x^T M x`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (x.transpose() * m * x)[(0, 0)]
}
