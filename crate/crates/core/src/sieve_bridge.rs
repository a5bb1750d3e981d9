//! Finite-basis solver for the outcome bridge E[Y - h(A, W) | Z] = 0.
//!
//! With bridge features B = b(A, W) and instrument features C = c(Z), the
//! coefficients solve E[C B'] theta = E[C Y] by min-norm least squares, or by
//! ridge when lambda > 0.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_model::ContrastSpec;
use crate::error::{IccError, Result};
use crate::estimators::EstimateReport;
use crate::linalg::{min_norm_solve, PINV_RTOL};
use crate::synth::{LinVar, LinearMoments};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BasisFamily {
    /// Monomials of total degree at most `degree` involving at most
    /// `interaction` distinct variables.
    Polynomial { degree: u32, interaction: usize },
    /// Per variable: x and the hinges (x - k)_+ for each knot.
    PiecewiseLinear { knots: Vec<Vec<f64>> },
    /// One indicator per joint cell. Levels per variable are taken from the
    /// data when not given. Cells span the intercept, so none is added.
    Indicator { levels: Option<Vec<Vec<f64>>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    #[serde(flatten)]
    pub family: BasisFamily,
    #[serde(default)]
    pub ridge: f64,
}

impl BasisSpec {
    pub fn polynomial(degree: u32, interaction: usize) -> Self {
        BasisSpec {
            family: BasisFamily::Polynomial { degree, interaction },
            ridge: 0.0,
        }
    }

    pub fn indicator(levels: Option<Vec<Vec<f64>>>) -> Self {
        BasisSpec {
            family: BasisFamily::Indicator { levels },
            ridge: 0.0,
        }
    }

    pub fn piecewise_linear(knots: Vec<Vec<f64>>) -> Self {
        BasisSpec {
            family: BasisFamily::PiecewiseLinear { knots },
            ridge: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Term {
    Intercept,
    Monomial(Vec<u32>),
    Linear(usize),
    Hinge(usize, f64),
    Cell(Vec<f64>),
}

impl Term {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Term::Intercept => 1.0,
            Term::Monomial(p) => p.iter().zip(x).map(|(&k, v)| v.powi(k as i32)).product(),
            Term::Linear(j) => x[*j],
            Term::Hinge(j, k) => (x[*j] - k).max(0.0),
            Term::Cell(c) => {
                if c.iter().zip(x).all(|(a, b)| a == b) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn name(&self, vars: &[String]) -> String {
        match self {
            Term::Intercept => "1".into(),
            Term::Monomial(p) => p
                .iter()
                .zip(vars)
                .filter(|(&k, _)| k > 0)
                .map(|(&k, v)| if k == 1 { v.clone() } else { format!("{v}^{k}") })
                .collect::<Vec<_>>()
                .join("*"),
            Term::Linear(j) => vars[*j].clone(),
            Term::Hinge(j, k) => format!("({}-{k})+", vars[*j]),
            Term::Cell(c) => vars
                .iter()
                .zip(c)
                .map(|(v, x)| format!("{v}={x}"))
                .collect::<Vec<_>>()
                .join(";"),
        }
    }
}

/// Deterministic feature map fixed at construction; reusable on new rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    vars: Vec<String>,
    terms: Vec<Term>,
    /// Observed (min, max) per variable.
    pub ranges: Vec<(f64, f64)>,
    pub diagnostics: Vec<String>,
}

impl FeatureMap {
    pub fn n_features(&self) -> usize {
        self.terms.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name(&self.vars)).collect()
    }

    pub fn eval_row(&self, x: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|t| t.eval(x)).collect()
    }

    /// Feature matrix of column-major variables.
    pub fn matrix(&self, cols: &[&[f64]]) -> Result<DMatrix<f64>> {
        if cols.len() != self.vars.len() {
            return Err(IccError::Dimension(format!(
                "feature map expects {} variables, got {}",
                self.vars.len(),
                cols.len()
            )));
        }
        let n = cols.first().map_or(0, |c| c.len());
        let mut x = vec![0.0; cols.len()];
        let mut m = DMatrix::zeros(n, self.terms.len());
        for i in 0..n {
            for (j, c) in cols.iter().enumerate() {
                x[j] = c[i];
            }
            for (k, t) in self.terms.iter().enumerate() {
                m[(i, k)] = t.eval(&x);
            }
        }
        Ok(m)
    }
}

fn monomials(n_vars: usize, degree: u32, interaction: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 1..=degree {
        let mut cur = vec![0u32; n_vars];
        fill(&mut cur, 0, total, &mut out);
    }
    return out
        .into_iter()
        .filter(|p| p.iter().filter(|&&k| k > 0).count() <= interaction.max(1))
        .collect();

    fn fill(cur: &mut Vec<u32>, j: usize, left: u32, out: &mut Vec<Vec<u32>>) {
        if j + 1 == cur.len() {
            cur[j] = left;
            out.push(cur.clone());
            return;
        }
        for k in (0..=left).rev() {
            cur[j] = k;
            fill(cur, j + 1, left - k, out);
        }
        cur[j] = 0;
    }
}

fn distinct(v: &[f64]) -> Vec<f64> {
    let mut d = v.to_vec();
    d.sort_by(f64::total_cmp);
    d.dedup();
    d
}

/// Build the feature map and matrix for named column-major variables.
pub fn build_features(names: &[&str], cols: &[&[f64]], spec: &BasisSpec) -> Result<(DMatrix<f64>, FeatureMap)> {
    if names.len() != cols.len() || cols.is_empty() {
        return Err(IccError::Dimension(
            "one name per variable, at least one variable".into(),
        ));
    }
    if spec.ridge < 0.0 || !spec.ridge.is_finite() {
        return Err(IccError::Domain("ridge penalty must be a finite value >= 0".into()));
    }
    let n = cols[0].len();
    if cols.iter().any(|c| c.len() != n) {
        return Err(IccError::Dimension("variables differ in length".into()));
    }
    let ranges: Vec<(f64, f64)> = cols
        .iter()
        .map(|c| {
            c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            })
        })
        .collect();
    let mut diagnostics = Vec::new();
    let terms = match &spec.family {
        BasisFamily::Polynomial { degree, interaction } => std::iter::once(Term::Intercept)
            .chain(
                monomials(cols.len(), *degree, *interaction)
                    .into_iter()
                    .map(Term::Monomial),
            )
            .collect(),
        BasisFamily::PiecewiseLinear { knots } => {
            if knots.len() != cols.len() {
                return Err(IccError::Dimension("one knot list per variable".into()));
            }
            let mut t = vec![Term::Intercept];
            for (j, ks) in knots.iter().enumerate() {
                t.push(Term::Linear(j));
                for &k in ks {
                    let (lo, hi) = ranges[j];
                    if k < lo || k >= hi {
                        diagnostics.push(format!("knot {k} outside the range of {} dropped", names[j]));
                    } else {
                        t.push(Term::Hinge(j, k));
                    }
                }
            }
            t
        }
        BasisFamily::Indicator { levels } => {
            let levels = match levels {
                Some(l) if l.len() == cols.len() => l.clone(),
                Some(_) => return Err(IccError::Dimension("one level list per variable".into())),
                None => cols.iter().map(|c| distinct(c)).collect(),
            };
            let mut cells: Vec<Vec<f64>> = vec![Vec::new()];
            for lv in &levels {
                cells = cells
                    .into_iter()
                    .flat_map(|c| {
                        lv.iter().map(move |&x| {
                            let mut c = c.clone();
                            c.push(x);
                            c
                        })
                    })
                    .collect();
            }
            cells.into_iter().map(Term::Cell).collect()
        }
    };
    let map = FeatureMap {
        vars: names.iter().map(|s| s.to_string()).collect(),
        terms,
        ranges,
        diagnostics,
    };
    if map.n_features() > n && spec.ridge == 0.0 {
        return Err(IccError::Dimension(format!(
            "{} features for {n} observations (set a ridge penalty to allow this)",
            map.n_features()
        )));
    }
    let m = map.matrix(cols)?;
    Ok((m, map))
}

#[derive(Debug, Clone)]
pub struct SieveFit {
    pub theta: DVector<f64>,
    /// Norm of E[C (Y - B theta)].
    pub residual_moment_norm: f64,
    pub rank: usize,
    pub nullspace_dim: usize,
    pub diagnostics: Vec<String>,
}

/// Solve `cb theta = cy` (moment form), min-norm or ridge.
pub fn fit_sieve_from_moments(cb: &DMatrix<f64>, cy: &DVector<f64>, ridge: f64) -> Result<SieveFit> {
    let mut diagnostics = Vec::new();
    if cb.nrows() < cb.ncols() && ridge == 0.0 {
        diagnostics.push(format!(
            "{} instrument features for {} bridge features: underdetermined, min-norm solution returned",
            cb.nrows(),
            cb.ncols()
        ));
    }
    let sol = min_norm_solve(cb, cy, PINV_RTOL)?;
    let theta = if ridge > 0.0 {
        let k = cb.ncols();
        let lhs = cb.transpose() * cb + DMatrix::identity(k, k) * ridge;
        lhs.cholesky()
            .ok_or_else(|| IccError::Singular("ridge system not positive definite".into()))?
            .solve(&(cb.transpose() * cy))
    } else {
        sol.x.clone()
    };
    if sol.rank < cb.ncols() {
        diagnostics.push(format!(
            "E[C B'] has rank {} < {} bridge features",
            sol.rank,
            cb.ncols()
        ));
    }
    Ok(SieveFit {
        residual_moment_norm: (cy - cb * &theta).norm(),
        rank: sol.rank,
        nullspace_dim: cb.ncols() - sol.rank,
        theta,
        diagnostics,
    })
}

/// Weighted sample (or population-atom) fit from feature matrices.
pub fn fit_sieve_weighted(
    y: &[f64],
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    weights: &[f64],
    ridge: f64,
) -> Result<SieveFit> {
    let n = y.len();
    if b.nrows() != n || c.nrows() != n || weights.len() != n {
        return Err(IccError::Dimension(
            "features, outcome and weights differ in length".into(),
        ));
    }
    let mut cw = c.clone();
    for (i, mut row) in cw.row_iter_mut().enumerate() {
        row *= weights[i];
    }
    let cb = cw.transpose() * b;
    let cy = cw.transpose() * DVector::from_column_slice(y);
    fit_sieve_from_moments(&cb, &cy, ridge)
}

/// Sample fit with weight 1/n per row.
pub fn fit_sieve_bridge(y: &[f64], b: &DMatrix<f64>, c: &DMatrix<f64>, ridge: f64) -> Result<SieveFit> {
    let w = vec![1.0 / y.len() as f64; y.len()];
    fit_sieve_weighted(y, b, c, &w, ridge)
}

/// J = E[sum_a pi(a) b(a, W) theta]. `map` must have A as its first variable;
/// `w_rows` holds the remaining variables per row with weights summing to one.
pub fn effect_from_sieve(
    theta: &DVector<f64>,
    map: &FeatureMap,
    w_rows: &[Vec<f64>],
    weights: &[f64],
    c: &ContrastSpec,
) -> Result<EstimateReport> {
    if theta.len() != map.n_features() {
        return Err(IccError::Dimension("coefficients do not match the basis".into()));
    }
    let mut report_diags = Vec::new();
    let (lo, hi) = map.ranges[0];
    let eff = c.effective();
    for (a, _) in &eff {
        if *a < lo || *a > hi {
            report_diags.push((format!("extrapolation: contrast value {a} outside [{lo}, {hi}]"), *a));
        }
    }
    let mut j = 0.0;
    let mut x = Vec::with_capacity(map.vars.len());
    for (row, wt) in w_rows.iter().zip(weights) {
        for (a, pa) in &eff {
            x.clear();
            x.push(*a);
            x.extend_from_slice(row);
            let f = map.eval_row(&x);
            j += wt * pa * f.iter().zip(theta.iter()).map(|(u, v)| u * v).sum::<f64>();
        }
    }
    let mut r = EstimateReport::new("sieve", j, w_rows.len());
    r.diagnostics = report_diags;
    Ok(r)
}

/// Population moments for basis (1, A, W) against instruments (1, Z) in a
/// mean-zero linear model: returns (E[C B'], E[C Y]).
pub fn linear_basis_moments(m: &LinearMoments) -> (DMatrix<f64>, DVector<f64>) {
    use LinVar::*;
    let (d_a, d_w, d_z) = (m.d_a, m.d_w, m.d_z);
    let kb = 1 + d_a + d_w;
    let kc = 1 + d_z;
    let mut cb = DMatrix::zeros(kc, kb);
    cb[(0, 0)] = 1.0;
    cb.view_mut((1, 1), (d_z, d_a)).copy_from(&m.block(Z, A));
    cb.view_mut((1, 1 + d_a), (d_z, d_w)).copy_from(&m.block(Z, W));
    let mut cy = DVector::zeros(kc);
    cy.rows_mut(1, d_z).copy_from(&m.block(Z, Y).column(0));
    (cb, cy)
}
