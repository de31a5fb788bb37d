//! Small dense linear-algebra helpers shared by the estimators and tests.
//!
//! Everything here works on `nalgebra` dynamic matrices. Rank decisions use a
//! single scale-free rule: a matrix is rank-deficient when its smallest
//! singular value falls below `RANK_TOL` times its largest.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{IvError, Result};

/// Relative singular-value threshold for rank and singularity checks.
pub const RANK_TOL: f64 = 1e-10;

const EIGEN_EPS: f64 = 1e-14;
const EIGEN_MAX_ITER: usize = 10_000;

/// Singular values of `a`. Tall matrices go through a QR factorisation first
/// so the SVD only ever runs on a `k × k` triangle.
pub fn singular_values(a: &DMatrix<f64>) -> DVector<f64> {
    if a.nrows() > a.ncols() && a.ncols() > 0 {
        let r = a.clone().qr().r();
        r.singular_values()
    } else {
        a.singular_values()
    }
}

/// Ratio of the smallest to the largest singular value (0 for a zero matrix).
pub fn inverse_condition(a: &DMatrix<f64>) -> f64 {
    let sv = singular_values(a);
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= 0.0 || !max.is_finite() {
        0.0
    } else {
        min / max
    }
}

pub fn has_full_column_rank(a: &DMatrix<f64>) -> bool {
    a.ncols() <= a.nrows() && a.ncols() > 0 && inverse_condition(a) >= RANK_TOL
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn cholesky(a: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(a)).ok_or_else(|| IvError::Singularity(format!("{what} is not positive definite")))
}

/// `g' A⁻¹ g` for symmetric positive definite `A`.
pub fn inverse_quadratic_form(a: &DMatrix<f64>, g: &DVector<f64>, what: &str) -> Result<f64> {
    let chol = cholesky(a, what)?;
    let l = chol.l();
    let w =
        l.solve_lower_triangular(g).ok_or_else(|| IvError::Singularity(format!("{what}: triangular solve failed")))?;
    Ok(w.dot(&w))
}

/// Solves `A x = b` for a square `A`, refusing near-singular systems.
pub fn solve_square(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if inverse_condition(a) < RANK_TOL {
        return Err(IvError::Singularity(format!("{what} is numerically singular")));
    }
    a.clone().lu().solve(b).ok_or_else(|| IvError::Singularity(format!("{what} is singular")))
}

pub fn solve_square_vec(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let x = solve_square(a, &DMatrix::from_column_slice(b.len(), 1, b.as_slice()), what)?;
    Ok(x.column(0).into_owned())
}

/// Least-squares coefficients of `b` on the columns of `a` (QR based).
pub fn least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let k = a.ncols();
    if !has_full_column_rank(a) {
        return Err(IvError::Rank(format!("{what} does not have full column rank")));
    }
    let qr = a.clone().qr();
    let mut qtb = b.clone();
    qr.q_tr_mul(&mut qtb);
    let top = qtb.rows(0, k).into_owned();
    qr.r().solve_upper_triangular(&top).ok_or_else(|| IvError::Singularity(format!("{what}: triangular solve failed")))
}

/// Residuals of `b` after projection on the column span of `a`.
pub fn residualize(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let coef = least_squares(a, b, what)?;
    Ok(b - a * coef)
}

fn symmetric_eigen(a: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, Dyn>> {
    SymmetricEigen::try_new(symmetrize(a), EIGEN_EPS, EIGEN_MAX_ITER)
        .ok_or_else(|| IvError::Convergence(format!("eigen-solver failed on {what}")))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>, what: &str) -> Result<Vec<f64>> {
    let eig = symmetric_eigen(a, what)?;
    let mut v: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    v.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    Ok(v)
}

/// `A^{-1/2}` for a symmetric positive definite matrix.
pub fn inverse_sqrt(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(a, what)?;
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if max <= 0.0 || eig.eigenvalues.iter().any(|&l| l < RANK_TOL * max) {
        return Err(IvError::Singularity(format!("{what} is not positive definite")));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// A factor `F` with `F F' = A` for a symmetric PSD matrix. Eigenvalues below
/// `1e-12 × trace` are clipped to zero before taking square roots.
pub fn psd_factor(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(a, what)?;
    let trace = a.trace().abs();
    let floor = 1e-12 * trace;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| if l < floor { 0.0 } else { l.sqrt() }));
    Ok(&eig.eigenvectors * d)
}

/// Smallest eigenpair of the symmetric-definite pencil `(A, B)`, i.e. the
/// minimum of `φ'Aφ / φ'Bφ`. Reduces to a standard symmetric problem with the
/// Cholesky factor of `B`. The returned eigenvector is normalised so that
/// `φ'Bφ = 1`.
pub fn smallest_generalized_eigen(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<(f64, DVector<f64>)> {
    let chol = cholesky(b, what)?;
    let l = chol.l();
    let li_a = l
        .solve_lower_triangular(&symmetrize(a))
        .ok_or_else(|| IvError::Singularity(format!("{what}: triangular solve failed")))?;
    let c = l
        .solve_lower_triangular(&li_a.transpose())
        .ok_or_else(|| IvError::Singularity(format!("{what}: triangular solve failed")))?;
    let eig = symmetric_eigen(&c, what)?;
    let (idx, &lambda) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.partial_cmp(y.1).unwrap_or(std::cmp::Ordering::Equal))
        .ok_or_else(|| IvError::Convergence(format!("{what}: empty pencil")))?;
    let y = eig.eigenvectors.column(idx).into_owned();
    let phi = l
        .transpose()
        .solve_upper_triangular(&y)
        .ok_or_else(|| IvError::Singularity(format!("{what}: triangular solve failed")))?;
    Ok((lambda, phi))
}

/// Column subset of `a` in the given order.
pub fn select_columns(a: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), cols.len(), |i, j| a[(i, cols[j])])
}

pub fn select_rows(a: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), a.ncols(), |i, j| a[(rows[i], j)])
}

pub fn column_matrix(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// Percentile with linear interpolation between order statistics
/// (the "type 7" rule). `sorted` must be ascending and non-empty.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn generalized_eigen_matches_rayleigh_minimum() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 3.0]);
        let (lambda, phi) = smallest_generalized_eigen(&a, &b, "pencil").unwrap();
        // det(A - λB) = 0 solved directly for the 2x2 case
        let qa = b[(0, 0)] * b[(1, 1)] - b[(0, 1)] * b[(1, 0)];
        let qb = -(a[(0, 0)] * b[(1, 1)] + a[(1, 1)] * b[(0, 0)] - 2.0 * a[(0, 1)] * b[(0, 1)]);
        let qc = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(0, 1)];
        let root = (-qb - (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa);
        assert_relative_eq!(lambda, root, epsilon = 1e-12);
        let bphi = (phi.transpose() * &b * &phi)[(0, 0)];
        assert_relative_eq!(bphi, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_rule_flags_duplicate_columns() {
        let a = DMatrix::from_fn(10, 2, |i, _| i as f64 + 1.0);
        assert!(!has_full_column_rank(&a));
        let b = DMatrix::from_fn(10, 2, |i, j| ((i + 1) as f64).powi(j as i32 + 1));
        assert!(has_full_column_rank(&b));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_sorted(&v, 0.5), 3.0);
        assert_relative_eq!(percentile_sorted(&v, 0.9), 4.6, epsilon = 1e-12);
        assert_relative_eq!(percentile_sorted(&v, 0.1), 1.4, epsilon = 1e-12);
    }

    #[test]
    fn inverse_sqrt_squares_to_inverse() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let s = inverse_sqrt(&a, "a").unwrap();
        let back = &s * &a * &s;
        assert_relative_eq!(back, DMatrix::identity(2, 2), epsilon = 1e-12);
    }
}
