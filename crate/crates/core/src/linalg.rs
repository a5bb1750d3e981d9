//! Dense linear-algebra helpers: nalgebra types, faer's SVD.
//!
//! Every solve in the crate goes through [`min_norm_solve`], so that bridge
//! solutions, sieve coefficients and the linear estimator share one rank
//! convention: singular values at or below `rtol * sigma_max` count as zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{IccError, Result};

/// Relative singular-value cutoff used throughout.
pub const PINV_RTOL: f64 = 1e-10;

/// Result of a minimum-norm least-squares solve of `a x = b`.
#[derive(Debug, Clone)]
pub struct MinNormSolution {
    pub x: DVector<f64>,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub residual_norm: f64,
    /// Orthonormal basis of the null space of `a`, one column per direction.
    pub nullspace: DMatrix<f64>,
}

/// SVD with a full right factor: returns `(u, s, v)` where `u` has
/// `min(m, p)` columns and `v` is `p x p` even for wide matrices. Singular
/// values are sorted in decreasing order and padded with zeros to length `p`.
///
/// faer does the factorization: nalgebra's SVD can stop short of convergence on
/// rank-deficient inputs, leaving trailing singular vectors that are not null.
pub fn svd_full(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (m, p) = a.shape();
    let k = m.min(p);
    if k == 0 {
        return (DMatrix::zeros(m, 0), vec![0.0; p], DMatrix::identity(p, p));
    }
    let fa = faer::Mat::from_fn(m, p, |i, j| a[(i, j)]);
    // Wide systems are small, so the full factorization is cheap there; tall
    // ones (data matrices) keep the thin left factor.
    let svd = if m < p { fa.svd() } else { fa.thin_svd() }.expect("SVD converges on finite input");
    let (fu, fs, fv) = (svd.U(), svd.S().column_vector(), svd.V());
    let u = DMatrix::from_fn(m, k, |i, j| fu[(i, j)]);
    let v = DMatrix::from_fn(p, p, |i, j| fv[(i, j)]);
    let mut s: Vec<f64> = (0..k).map(|i| fs[i]).collect();
    s.resize(p, 0.0);
    (u, s, v)
}

/// Number of singular values above `rtol * sigma_max`.
pub fn numerical_rank(s: &[f64], rtol: f64) -> usize {
    let smax = s.iter().copied().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rtol * smax).count()
}

pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let k = a.nrows().min(a.ncols());
    if k == 0 {
        return Vec::new();
    }
    let fa = faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)]);
    let mut s = fa.singular_values().expect("SVD converges on finite input");
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>, rtol: f64) -> Result<MinNormSolution> {
    let (m, p) = a.shape();
    if m == 0 || p == 0 {
        return Err(IccError::Domain("empty system matrix".into()));
    }
    if b.len() != m {
        return Err(IccError::Dimension(format!(
            "right-hand side has length {} but system has {} rows",
            b.len(),
            m
        )));
    }
    let (u, s, v) = svd_full(a);
    let rank = numerical_rank(&s, rtol);
    let mut x = DVector::zeros(p);
    for i in 0..rank {
        let coef = u.column(i).dot(b) / s[i];
        x.axpy(coef, &v.column(i), 1.0);
    }
    let residual_norm = (a * &x - b).norm();
    let nullspace = v.columns(rank, p - rank).into_owned();
    Ok(MinNormSolution {
        x,
        rank,
        singular_values: s.into_iter().take(m.min(p)).collect(),
        residual_norm,
        nullspace,
    })
}

/// Moore-Penrose pseudoinverse with relative cutoff.
pub fn pinv(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let (m, p) = a.shape();
    if m == 0 || p == 0 {
        return DMatrix::zeros(p, m);
    }
    let (u, s, v) = svd_full(a);
    let rank = numerical_rank(&s, rtol);
    let mut out = DMatrix::zeros(p, m);
    for i in 0..rank {
        out += (v.column(i) * u.column(i).transpose()) / s[i];
    }
    out
}

/// Orthonormal basis (n x r) for the column space of `x`.
pub fn column_basis(x: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let (n, k) = x.shape();
    if k == 0 || n == 0 {
        return DMatrix::zeros(n, 0);
    }
    let (u, s, _) = svd_full(x);
    let r = numerical_rank(&s, rtol);
    u.columns(0, r).into_owned()
}

/// Ordinary least squares with an explicit singularity check.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, k) = x.shape();
    if n < k {
        return Err(IccError::Singular(format!(
            "{n} observations cannot identify {k} regression coefficients"
        )));
    }
    let sol = min_norm_solve(x, y, PINV_RTOL)?;
    if sol.rank < k {
        return Err(IccError::Singular(format!(
            "regressor matrix has rank {} < {} columns (collinear regressors)",
            sol.rank, k
        )));
    }
    Ok(sol.x)
}

/// Horizontal concatenation.
pub fn hcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    let k: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, k);
    let mut col = 0;
    for b in blocks {
        assert_eq!(b.nrows(), n, "hcat: row mismatch");
        out.view_mut((0, col), (n, b.ncols())).copy_from(*b);
        col += b.ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_norm_picks_smallest_solution() {
        // x1 + x2 = 2 has min-norm solution (1, 1) and a one-dimensional null space.
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0]);
        let sol = min_norm_solve(&a, &b, PINV_RTOL).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-14 && (sol.x[1] - 1.0).abs() < 1e-14);
        assert_eq!(sol.rank, 1);
        assert_eq!(sol.nullspace.ncols(), 1);
        assert!((a * sol.nullspace.column(0)).norm() < 1e-14);
    }

    #[test]
    fn inconsistent_system_reports_residual() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![0.0, 2.0]);
        let sol = min_norm_solve(&a, &b, PINV_RTOL).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-14);
        assert!((sol.residual_norm - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pinv_of_rank_one() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = pinv(&a, PINV_RTOL);
        assert!((p[(0, 0)] - 0.25).abs() < 1e-14);
        assert!((&a * &p * &a - &a).norm() < 1e-13);
    }

    #[test]
    fn collinear_ols_is_singular() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(ols(&x, &y), Err(IccError::Singular(_))));
    }

    #[test]
    fn wide_rank_deficient_factor_is_exact() {
        // Rank-2 outer-product structure, 4 x 6: the shape that padding got wrong.
        let pa = [0.07, 0.92, 0.21, 0.99];
        let pw = [0.29, 0.67, 0.04];
        let a = DMatrix::from_fn(4, 6, |z, j| {
            let p = if j < 3 { 1.0 - pa[z] } else { pa[z] };
            p * pw[j % 3] * (1.0 + 0.3 * (j / 3) as f64 * z as f64)
        });
        let (u, s, v) = svd_full(&a);
        assert_eq!(v.shape(), (6, 6));
        assert!((v.transpose() * &v - DMatrix::identity(6, 6)).amax() < 1e-12);
        let k = u.ncols();
        let sd = DMatrix::from_diagonal(&DVector::from_column_slice(&s[..k]));
        assert!((&u * sd * v.columns(0, k).transpose() - &a).amax() < 1e-13);
        let h = DVector::from_fn(6, |j, _| if j < 3 { 0.5 } else { -0.2 });
        let sol = min_norm_solve(&a, &(&a * h), PINV_RTOL).unwrap();
        assert!(sol.residual_norm < 1e-13);
        assert!((&a * &sol.nullspace).amax() < 1e-13);
    }
}
