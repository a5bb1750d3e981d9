//! Linear instrumented common confounding (ICC) estimator.
//!
//! The estimator is 2SLS of Y on (A, W V_r) with instruments Z, where V_r spans
//! the top-r right singular subspace of the first-stage fit P_Z W. Everything
//! except the covariance depends on the data only through the instrument
//! cross-moments G(X1, X2) = X1' Z (Z'Z)^-1 Z' X2, so sample fits and
//! population fits share [`icc_from_cross`]. No intercept is added; centre the
//! data first if needed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{IccError, Result};
use crate::linalg::{hcat, ols, singular_values, svd_full};
use crate::synth::{LinVar, LinearMoments};

/// Relative singular-value gap for automatic rank selection.
pub const RANK_GAP: f64 = 1e-3;
/// Relative eigenvalue floor for the conditional relevance check.
const RELEVANCE_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankChoice {
    #[default]
    Auto,
    Declared(usize),
}

/// Residual used in the sandwich meat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SandwichResidual {
    /// Y - A b - W V_r d: the 2SLS structural error.
    #[default]
    Structural,
    /// Y - A b - P_Z W V_r d.
    Projected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IccOptions {
    pub rank: RankChoice,
    pub residual: SandwichResidual,
}

impl IccOptions {
    pub fn declared(d_u: usize) -> Self {
        IccOptions {
            rank: RankChoice::Declared(d_u),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearICCFit {
    pub beta_hat: DVector<f64>,
    /// Slope on the rank-r projected proxies W V_r.
    pub delta_hat: DVector<f64>,
    /// Covariance of (beta, delta); absent for population fits.
    pub cov: Option<DMatrix<f64>>,
    pub rank_used: usize,
    /// Structural residuals Y - A b - W V_r d; empty for population fits.
    pub residuals: DVector<f64>,
    /// Singular values of P_Z W, descending.
    pub singular_values: Vec<f64>,
    /// d_W x r basis V_r.
    pub w_basis: DMatrix<f64>,
}

impl LinearICCFit {
    /// delta expressed on the original proxies: V_r d.
    pub fn delta_on_w(&self) -> DVector<f64> {
        &self.w_basis * &self.delta_hat
    }

    pub fn se_beta(&self) -> Option<DVector<f64>> {
        let d_a = self.beta_hat.len();
        self.cov
            .as_ref()
            .map(|c| DVector::from_fn(d_a, |i, _| c[(i, i)].max(0.0).sqrt()))
    }
}

/// Rank of the projected proxies: the declared value, or the count of singular
/// values above `RANK_GAP` times the largest.
pub fn select_rank(sv: &[f64], declared: Option<usize>, max_rank: usize) -> Result<usize> {
    match declared {
        Some(r) if r > max_rank => Err(IccError::Dimension(format!(
            "declared rank {r} exceeds min(d_W, d_Z) = {max_rank}"
        ))),
        Some(r) => Ok(r),
        None => {
            let smax = sv.iter().copied().fold(0.0, f64::max);
            if smax == 0.0 {
                return Ok(0);
            }
            Ok(sv.iter().filter(|&&s| s > RANK_GAP * smax).count().min(max_rank))
        }
    }
}

/// Instrument cross-moments G(., .) for (A, W, Y).
#[derive(Debug, Clone)]
pub struct InstrumentCross {
    pub gaa: DMatrix<f64>,
    pub gaw: DMatrix<f64>,
    pub gww: DMatrix<f64>,
    pub gay: DVector<f64>,
    pub gwy: DVector<f64>,
    /// Scale turning eigenvalues of G(W, W) into singular values of P_Z W.
    pub n_scale: f64,
}

fn chol_inv_apply(szz: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ch = szz
        .clone()
        .cholesky()
        .ok_or_else(|| IccError::Singular("instrument second-moment matrix is not positive definite".into()))?;
    Ok(ch.solve(rhs))
}

impl InstrumentCross {
    /// From Z'Z and Z'(A, W, Y) blocks.
    pub fn new(
        szz: &DMatrix<f64>,
        sza: &DMatrix<f64>,
        szw: &DMatrix<f64>,
        szy: &DVector<f64>,
        n_scale: f64,
    ) -> Result<Self> {
        let ia = chol_inv_apply(szz, sza)?;
        let iw = chol_inv_apply(szz, szw)?;
        let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
        Ok(InstrumentCross {
            gaa: sym(sza.transpose() * &ia),
            gaw: sza.transpose() * &iw,
            gww: sym(szw.transpose() * &iw),
            gay: ia.transpose() * szy,
            gwy: iw.transpose() * szy,
            n_scale,
        })
    }

    pub fn from_sample(y: &DVector<f64>, a: &DMatrix<f64>, z: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<Self> {
        check_shapes(y, a, z, w)?;
        let zt = z.transpose();
        InstrumentCross::new(&(&zt * z), &(&zt * a), &(&zt * w), &(&zt * y), 1.0)
    }

    /// Population cross-moments; singular values are reported per unit n.
    pub fn from_moments(m: &LinearMoments) -> Result<Self> {
        use LinVar::*;
        let szy = m.block(Z, Y).column(0).into_owned();
        InstrumentCross::new(&m.block(Z, Z), &m.block(Z, A), &m.block(Z, W), &szy, 1.0)
    }
}

fn check_shapes(y: &DVector<f64>, a: &DMatrix<f64>, z: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<()> {
    let n = y.len();
    if a.nrows() != n || z.nrows() != n || w.nrows() != n {
        return Err(IccError::Dimension(
            "Y, A, Z and W must have the same number of rows".into(),
        ));
    }
    if z.ncols() < a.ncols() {
        return Err(IccError::Dimension(format!(
            "{} instruments for {} treatments",
            z.ncols(),
            a.ncols()
        )));
    }
    if n <= z.ncols() {
        return Err(IccError::Dimension(format!("n = {n} must exceed d_Z = {}", z.ncols())));
    }
    Ok(())
}

/// Point estimates from instrument cross-moments.
pub fn icc_from_cross(g: &InstrumentCross, rank: RankChoice, d_z: usize) -> Result<LinearICCFit> {
    let d_a = g.gaa.nrows();
    let d_w = g.gww.nrows();
    let eig = SymmetricEigen::new(g.gww.clone());
    let mut order: Vec<usize> = (0..d_w).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let sv: Vec<f64> = order
        .iter()
        .map(|&i| (eig.eigenvalues[i].max(0.0) * g.n_scale).sqrt())
        .collect();
    let declared = match rank {
        RankChoice::Auto => None,
        RankChoice::Declared(r) => Some(r),
    };
    let r = select_rank(&sv, declared, d_w.min(d_z))?;
    if d_z < d_a + r {
        return Err(IccError::Dimension(format!("d_Z = {d_z} < d_A + r = {}", d_a + r)));
    }
    let vr = DMatrix::from_fn(d_w, r, |i, j| eig.eigenvectors[(i, order[j])]);
    let gav = &g.gaw * &vr;
    let gvv = vr.transpose() * &g.gww * &vr;
    // Conditional relevance: A' P_Z M_W P_Z A.
    let schur = if r > 0 {
        let inv = gvv
            .clone()
            .cholesky()
            .ok_or_else(|| IccError::Relevance("projected proxies are rank deficient at the chosen rank".into()))?;
        &g.gaa - &gav * inv.solve(&gav.transpose())
    } else {
        g.gaa.clone()
    };
    let s_eig = SymmetricEigen::new((&schur + schur.transpose()) * 0.5);
    let scale = SymmetricEigen::new(g.gaa.clone()).eigenvalues.amax();
    if s_eig.eigenvalues.min() <= RELEVANCE_RTOL * scale {
        return Err(IccError::Relevance(
            "instruments not relevant conditional on projected proxies".into(),
        ));
    }
    let k = d_a + r;
    let mut gxx = DMatrix::zeros(k, k);
    gxx.view_mut((0, 0), (d_a, d_a)).copy_from(&g.gaa);
    gxx.view_mut((0, d_a), (d_a, r)).copy_from(&gav);
    gxx.view_mut((d_a, 0), (r, d_a)).copy_from(&gav.transpose());
    gxx.view_mut((d_a, d_a), (r, r)).copy_from(&gvv);
    let mut gxy = DVector::zeros(k);
    gxy.rows_mut(0, d_a).copy_from(&g.gay);
    gxy.rows_mut(d_a, r).copy_from(&(vr.transpose() * &g.gwy));
    let theta = gxx
        .clone()
        .lu()
        .solve(&gxy)
        .ok_or_else(|| IccError::Relevance("second-stage normal equations are singular".into()))?;
    Ok(LinearICCFit {
        beta_hat: theta.rows(0, d_a).into_owned(),
        delta_hat: theta.rows(d_a, r).into_owned(),
        cov: None,
        rank_used: r,
        residuals: DVector::zeros(0),
        singular_values: sv,
        w_basis: vr,
    })
}

/// Projection of `x` on the column space of `z`.
fn project(z: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let zt = z.transpose();
    Ok(z * chol_inv_apply(&(&zt * z), &(&zt * x))?)
}

/// Sample ICC fit with sandwich covariance.
pub fn fit_icc(
    y: &DVector<f64>,
    a: &DMatrix<f64>,
    z: &DMatrix<f64>,
    w: &DMatrix<f64>,
    opts: IccOptions,
) -> Result<LinearICCFit> {
    let g = InstrumentCross::from_sample(y, a, z, w)?;
    let mut fit = icc_from_cross(&g, opts.rank, z.ncols())?;
    finish_sample_fit(&mut fit, y, a, z, w, opts.residual)?;
    Ok(fit)
}

fn finish_sample_fit(
    fit: &mut LinearICCFit,
    y: &DVector<f64>,
    a: &DMatrix<f64>,
    z: &DMatrix<f64>,
    w: &DMatrix<f64>,
    residual: SandwichResidual,
) -> Result<()> {
    fit.residuals = y - a * &fit.beta_hat - w * fit.delta_on_w();
    fit.cov = Some(sandwich_cov(fit, y, a, z, w, residual)?);
    Ok(())
}

/// Population ICC fit from model covariances.
pub fn fit_icc_population(m: &LinearMoments, rank: RankChoice) -> Result<LinearICCFit> {
    icc_from_cross(&InstrumentCross::from_moments(m)?, rank, m.d_z)
}

/// Heteroskedasticity-robust sandwich for (beta, delta):
/// (X'P_Z X)^-1 (sum x_i x_i' e_i^2) (X'P_Z X)^-1 with x_i the rows of P_Z (A, W V_r).
pub fn sandwich_cov(
    fit: &LinearICCFit,
    y: &DVector<f64>,
    a: &DMatrix<f64>,
    z: &DMatrix<f64>,
    w: &DMatrix<f64>,
    residual: SandwichResidual,
) -> Result<DMatrix<f64>> {
    let wv = w * &fit.w_basis;
    let x = hcat(&[a, &wv]);
    let xh = project(z, &x)?;
    let e = match residual {
        SandwichResidual::Structural => y - a * &fit.beta_hat - &wv * &fit.delta_hat,
        SandwichResidual::Projected => y - a * &fit.beta_hat - xh.columns(a.ncols(), wv.ncols()) * &fit.delta_hat,
    };
    let bread = (xh.transpose() * &xh)
        .try_inverse()
        .ok_or_else(|| IccError::Singular("second-stage design is singular".into()))?;
    let mut scaled = xh.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= e[i];
    }
    let meat = scaled.transpose() * &scaled;
    let cov = &bread * meat * &bread;
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Top-r right singular vectors of P_Z W computed in observation space.
fn projected_basis(w_hat: &DMatrix<f64>, rank: RankChoice, d_z: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let sv = singular_values(w_hat);
    let declared = match rank {
        RankChoice::Auto => None,
        RankChoice::Declared(r) => Some(r),
    };
    let r = select_rank(&sv, declared, w_hat.ncols().min(d_z))?;
    let (_, _, v) = svd_full(w_hat);
    Ok((v.columns(0, r).into_owned(), sv))
}

/// Control-function form: OLS of Y on (A, A - Z pi_hat, P_Z W V_r).
pub fn fit_icc_control_form(
    y: &DVector<f64>,
    a: &DMatrix<f64>,
    z: &DMatrix<f64>,
    w: &DMatrix<f64>,
    opts: IccOptions,
) -> Result<LinearICCFit> {
    check_shapes(y, a, z, w)?;
    let d_a = a.ncols();
    let mut v_hat = a.clone();
    for j in 0..d_a {
        let pi = ols(z, &a.column(j).into_owned())?;
        v_hat.set_column(j, &(a.column(j) - z * pi));
    }
    let w_hat = project(z, w)?;
    let (vr, sv) = projected_basis(&w_hat, opts.rank, z.ncols())?;
    let r = vr.ncols();
    let x = hcat(&[a, &v_hat, &(&w_hat * &vr)]);
    let coef = ols(&x, y)
        .map_err(|_| IccError::Relevance("instruments not relevant conditional on projected proxies".into()))?;
    let mut fit = LinearICCFit {
        beta_hat: coef.rows(0, d_a).into_owned(),
        delta_hat: coef.rows(2 * d_a, r).into_owned(),
        cov: None,
        rank_used: r,
        residuals: DVector::zeros(0),
        singular_values: sv,
        w_basis: vr,
    };
    finish_sample_fit(&mut fit, y, a, z, w, opts.residual)?;
    Ok(fit)
}

/// Explicit two stages: OLS of Y on (P_Z A, P_Z W V_r).
pub fn fit_icc_two_stage(
    y: &DVector<f64>,
    a: &DMatrix<f64>,
    z: &DMatrix<f64>,
    w: &DMatrix<f64>,
    opts: IccOptions,
) -> Result<LinearICCFit> {
    check_shapes(y, a, z, w)?;
    let d_a = a.ncols();
    let a_hat = project(z, a)?;
    let w_hat = project(z, w)?;
    let (vr, sv) = projected_basis(&w_hat, opts.rank, z.ncols())?;
    let r = vr.ncols();
    let coef = ols(&hcat(&[&a_hat, &(&w_hat * &vr)]), y)
        .map_err(|_| IccError::Relevance("instruments not relevant conditional on projected proxies".into()))?;
    let mut fit = LinearICCFit {
        beta_hat: coef.rows(0, d_a).into_owned(),
        delta_hat: coef.rows(d_a, r).into_owned(),
        cov: None,
        rank_used: r,
        residuals: DVector::zeros(0),
        singular_values: sv,
        w_basis: vr,
    };
    finish_sample_fit(&mut fit, y, a, z, w, opts.residual)?;
    Ok(fit)
}

/// Coefficients with robust (HC0) covariance.
#[derive(Debug, Clone)]
pub struct LinearEstimate {
    pub coef: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LinearEstimate {
    pub fn se(&self, i: usize) -> f64 {
        self.cov[(i, i)].max(0.0).sqrt()
    }
}

fn hc0(xh: &DMatrix<f64>, e: &DVector<f64>) -> Result<DMatrix<f64>> {
    let bread = (xh.transpose() * xh)
        .try_inverse()
        .ok_or_else(|| IccError::Singular("design matrix is singular".into()))?;
    let mut scaled = xh.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= e[i];
    }
    let meat = scaled.transpose() * &scaled;
    Ok(&bread * meat * &bread)
}

pub fn fit_ols(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<LinearEstimate> {
    let coef = ols(x, y)?;
    let e = y - x * &coef;
    Ok(LinearEstimate { cov: hc0(x, &e)?, coef })
}

pub fn fit_2sls(y: &DVector<f64>, a: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<LinearEstimate> {
    if z.ncols() < a.ncols() {
        return Err(IccError::Dimension("2SLS needs d_Z >= d_A".into()));
    }
    let a_hat = project(z, a)?;
    let coef = ols(&a_hat, y)?;
    let e = y - a * &coef;
    Ok(LinearEstimate {
        cov: hc0(&a_hat, &e)?,
        coef,
    })
}

/// Population 2SLS: (S_AZ S_ZZ^-1 S_ZA)^-1 S_AZ S_ZZ^-1 S_ZY.
pub fn fit_2sls_population(m: &LinearMoments) -> Result<DVector<f64>> {
    let g = InstrumentCross::from_moments(m)?;
    g.gaa
        .clone()
        .lu()
        .solve(&g.gay)
        .ok_or_else(|| IccError::Singular("instruments have no first stage".into()))
}

/// Population OLS of Y on A.
pub fn fit_ols_population(m: &LinearMoments) -> Result<DVector<f64>> {
    use LinVar::*;
    m.block(A, A)
        .lu()
        .solve(&m.block(A, Y).column(0).into_owned())
        .ok_or_else(|| IccError::Singular("treatment has zero variance".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::LinearDGPSpec;

    fn draw(n: usize, seed: u64) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let s = LinearDGPSpec::confounded_reference().sample_matrices(n, seed).unwrap();
        (s.y.column(0).into_owned(), s.a, s.z, s.w)
    }

    #[test]
    fn rank_selection() {
        assert_eq!(select_rank(&[5.0, 4.9, 0.001], None, 3).unwrap(), 2);
        assert_eq!(select_rank(&[5.0, 4.9, 0.001], Some(1), 3).unwrap(), 1);
        assert!(matches!(select_rank(&[5.0], Some(2), 1), Err(IccError::Dimension(_))));
    }

    #[test]
    fn population_fit_is_exact() {
        let m = LinearDGPSpec::confounded_reference().population_moments().unwrap();
        let fit = fit_icc_population(&m, RankChoice::Auto).unwrap();
        assert_eq!(fit.rank_used, 1);
        assert!((fit.beta_hat[0] - 1.0).abs() < 1e-12);
        let tsls = fit_2sls_population(&m).unwrap()[0];
        assert!((tsls - 2.275 / 1.78).abs() < 1e-12);
    }

    #[test]
    fn three_forms_agree() {
        let (y, a, z, w) = draw(500, 3);
        let o = IccOptions::declared(1);
        let f1 = fit_icc(&y, &a, &z, &w, o).unwrap();
        let f2 = fit_icc_control_form(&y, &a, &z, &w, o).unwrap();
        let f3 = fit_icc_two_stage(&y, &a, &z, &w, o).unwrap();
        assert!((&f1.beta_hat - &f2.beta_hat).amax() < 1e-10);
        assert!((&f1.beta_hat - &f3.beta_hat).amax() < 1e-10);
        assert!((f1.delta_on_w() - f3.delta_on_w()).amax() < 1e-10);
        assert!((f1.cov.as_ref().unwrap() - f3.cov.as_ref().unwrap()).amax() < 1e-10);
    }

    #[test]
    fn rank_zero_is_2sls() {
        let (y, a, z, w) = draw(300, 4);
        let f = fit_icc(&y, &a, &z, &w, IccOptions::declared(0)).unwrap();
        let t = fit_2sls(&y, &a, &z).unwrap();
        assert!((f.beta_hat[0] - t.coef[0]).abs() < 1e-10);
        assert!((f.cov.unwrap()[(0, 0)] - t.cov[(0, 0)]).abs() < 1e-10);
    }

    #[test]
    fn proxy_reparameterization_invariance() {
        let spec = LinearDGPSpec {
            gamma_w: vec![vec![1.0, 0.5]],
            zeta: vec![0.5, -0.3],
            pi_fs: vec![vec![1.0], vec![0.5], vec![-0.4]],
            gamma_tilde_z: vec![vec![0.3], vec![-0.2], vec![0.1]],
            noise_cov: crate::synth::linear::identity(5),
            z_cov: crate::synth::linear::identity(3),
            ..LinearDGPSpec::confounded_reference()
        };
        let s = spec.sample_matrices(400, 9).unwrap();
        let y = s.y.column(0).into_owned();
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -0.5, 3.0]);
        // Without rank reduction the projection span is basis free.
        let o = IccOptions::declared(2);
        let f1 = fit_icc(&y, &s.a, &s.z, &s.w, o).unwrap();
        let f2 = fit_icc(&y, &s.a, &s.z, &(&s.w * b), o).unwrap();
        assert!((f1.beta_hat[0] - f2.beta_hat[0]).abs() < 1e-10);
    }

    #[test]
    fn covariance_homogeneity_and_zero_noise() {
        let (y, a, z, w) = draw(300, 5);
        let o = IccOptions::declared(1);
        let f1 = fit_icc(&y, &a, &z, &w, o).unwrap();
        let f2 = fit_icc(&(&y * 2.0), &a, &z, &w, o).unwrap();
        let c1 = f1.cov.unwrap();
        assert!((f2.cov.unwrap() - &c1 * 4.0).amax() < 1e-10 * c1.amax().max(1.0));
        let exact = &a * 1.5 + &w * 0.7;
        let f = fit_icc(&exact.column(0).into_owned(), &a, &z, &w, o).unwrap();
        assert!(f.cov.unwrap().amax() < 1e-20);
        assert!((f.beta_hat[0] - 1.5).abs() < 1e-10);
    }

    #[test]
    fn irrelevant_instruments_rejected() {
        let (y, a, z, w) = draw(200, 6);
        // Z enters only through W: A has no conditional first stage.
        let a2 = &w * 2.0;
        let err = fit_icc(&y, &a2, &z, &w, IccOptions::declared(1)).unwrap_err();
        assert!(matches!(err, IccError::Relevance(_)), "{err}");
        let _ = a;
    }

    #[test]
    fn collinear_ols_is_singular() {
        let (y, a, _, _) = draw(50, 7);
        let x = hcat(&[&a, &(&a * 2.0)]);
        assert!(matches!(fit_ols(&y, &x), Err(IccError::Singular(_))));
    }
}
