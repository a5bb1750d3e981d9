//! Exact linear-system solvers for discrete bridge functions.
//!
//! Every system is solved by min-norm least squares. A solution is valid when
//! its residual is at most `tol` times the norm of the right-hand side.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data_model::ContrastSpec;
use crate::error::{IccError, Result};
use crate::estimators::moments::{crosstab, normalize_columns, smooth, Cells};
use crate::linalg::{min_norm_solve, PINV_RTOL};
use crate::synth::{DiscretePopulation, Var};

/// Default relative residual tolerance for validity.
pub const SOLVE_TOL: f64 = 1e-8;

/// Conditional probability table: rows are target cells, columns are the
/// conditioning cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CondTable {
    pub matrix: DMatrix<f64>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Conditioning cells with positive mass.
    pub defined: Vec<bool>,
}

/// Vector of conditional quantities indexed by labelled cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CondVector {
    pub values: DVector<f64>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct BridgeSolution {
    pub labels: Vec<String>,
    pub coeffs: DVector<f64>,
    pub residual_norm: f64,
    pub rhs_norm: f64,
    pub rank: usize,
    pub nullspace_dim: usize,
    pub nullspace_basis: Option<DMatrix<f64>>,
    pub tol: f64,
    system: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl BridgeSolution {
    pub fn is_valid(&self) -> bool {
        self.is_valid_at(self.tol)
    }

    pub fn is_valid_at(&self, tol: f64) -> bool {
        self.residual_norm <= tol * self.rhs_norm
    }

    /// Residual of arbitrary coefficients against this solution's system.
    pub fn residual_of(&self, coeffs: &DVector<f64>) -> f64 {
        (&self.system * coeffs - &self.rhs).norm()
    }

    pub fn system(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.system, &self.rhs)
    }

    pub fn with_coeffs(&self, coeffs: DVector<f64>) -> BridgeSolution {
        let residual_norm = self.residual_of(&coeffs);
        BridgeSolution {
            coeffs,
            residual_norm,
            ..self.clone()
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_labeled_csv(path, [("", self)].into_iter())
    }
}

/// Min-norm solve of `m x = b` with labelled unknowns.
pub fn solve_system(m: DMatrix<f64>, b: DVector<f64>, labels: Vec<String>, tol: f64) -> Result<BridgeSolution> {
    if labels.len() != m.ncols() {
        return Err(IccError::Schema(format!(
            "{} unknown labels for {} unknowns",
            labels.len(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(BridgeSolution {
            coeffs: DVector::zeros(m.ncols()),
            residual_norm: 0.0,
            rhs_norm: 0.0,
            rank: 0,
            nullspace_dim: m.ncols(),
            nullspace_basis: Some(DMatrix::identity(m.ncols(), m.ncols())),
            tol,
            labels,
            system: m,
            rhs: b,
        });
    }
    let sol = min_norm_solve(&m, &b, PINV_RTOL)?;
    let nullspace_dim = sol.nullspace.ncols();
    Ok(BridgeSolution {
        labels,
        coeffs: sol.x,
        residual_norm: sol.residual_norm,
        rhs_norm: b.norm(),
        rank: sol.rank,
        nullspace_dim,
        nullspace_basis: (nullspace_dim > 0).then_some(sol.nullspace),
        tol,
        system: m,
        rhs: b,
    })
}

/// Keep the rows of `m`/`b` flagged true.
fn select_rows(m: &DMatrix<f64>, b: &DVector<f64>, keep: &[bool]) -> (DMatrix<f64>, DVector<f64>) {
    let idx: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    (m.select_rows(idx.iter()), b.select_rows(idx.iter()))
}

/// Solve H(A,W) P(A,W|Z) = E[Y|Z] for H over the (a, w) cells.
pub fn solve_outcome_bridge(p_aw_given_z: &CondTable, ey_given_z: &CondVector, tol: f64) -> Result<BridgeSolution> {
    if p_aw_given_z.col_labels != ey_given_z.labels {
        return Err(IccError::Schema(
            "instrument labels of P(A,W|Z) and E[Y|Z] do not align".into(),
        ));
    }
    let m = p_aw_given_z.matrix.transpose();
    let (m, b) = select_rows(&m, &ey_given_z.values, &p_aw_given_z.defined);
    solve_system(m, b, p_aw_given_z.row_labels.clone(), tol)
}

/// Tables for the observed outcome-bridge system.
#[derive(Debug, Clone)]
pub struct OutcomeTables {
    pub p_aw_given_z: CondTable,
    pub ey_given_z: CondVector,
    pub p_w: Vec<f64>,
    pub a_levels: Vec<f64>,
    pub d_w: usize,
}

fn aw_labels(a_levels: &[f64], d_w: usize) -> Vec<String> {
    a_levels
        .iter()
        .flat_map(|a| (0..d_w).map(move |w| format!("a={a};w={w}")))
        .collect()
}

fn z_labels(d_z: usize) -> Vec<String> {
    (0..d_z).map(|z| format!("z={z}")).collect()
}

/// Frequency (or population) tables for the outcome bridge, with optional
/// Laplace smoothing `alpha` added to the (a, w, z) counts.
pub fn outcome_tables(c: &Cells, alpha: f64) -> OutcomeTables {
    let d_a = c.a_levels.len();
    let aw: Vec<usize> = c.a.iter().zip(&c.w).map(|(a, w)| a * c.d_w + w).collect();
    let mut t = crosstab(&c.weight, &aw, d_a * c.d_w, &c.z, c.d_z, |_| true);
    let raw_mass: Vec<f64> = (0..c.d_z).map(|j| t.column(j).sum()).collect();
    smooth(&mut t, alpha * c.weight.first().copied().unwrap_or(0.0));
    normalize_columns(&mut t);
    let mut ey = vec![0.0; c.d_z];
    for i in 0..c.len() {
        ey[c.z[i]] += c.weight[i] * c.y[i];
    }
    for (z, e) in ey.iter_mut().enumerate() {
        if raw_mass[z] > 0.0 {
            *e /= raw_mass[z];
        }
    }
    let mut p_w = vec![0.0; c.d_w];
    for i in 0..c.len() {
        p_w[c.w[i]] += c.weight[i];
    }
    OutcomeTables {
        p_aw_given_z: CondTable {
            matrix: t,
            row_labels: aw_labels(&c.a_levels, c.d_w),
            col_labels: z_labels(c.d_z),
            defined: raw_mass.iter().map(|&m| m > 0.0).collect(),
        },
        ey_given_z: CondVector {
            values: DVector::from_vec(ey),
            labels: z_labels(c.d_z),
        },
        p_w,
        a_levels: c.a_levels.clone(),
        d_w: c.d_w,
    }
}

/// J = sum_a pi(a) sum_w H(a, w) p(w).
pub fn effect_from_outcome_bridge(
    sol: &BridgeSolution,
    p_w: &[f64],
    a_levels: &[f64],
    c: &ContrastSpec,
) -> Result<f64> {
    if !sol.is_valid() {
        return Err(IccError::Identification(format!(
            "outcome bridge residual {:.3e} above tolerance: completeness of W for U likely violated (W relevance)",
            sol.residual_norm
        )));
    }
    let d_w = p_w.len();
    if sol.coeffs.len() != a_levels.len() * d_w {
        return Err(IccError::Dimension(format!(
            "bridge has {} coefficients, expected {} x {}",
            sol.coeffs.len(),
            a_levels.len(),
            d_w
        )));
    }
    let pi = c.weights_on_levels(a_levels)?;
    let mut j = 0.0;
    for (a, wa) in pi.iter().enumerate() {
        if *wa != 0.0 {
            for (w, pw) in p_w.iter().enumerate() {
                j += wa * sol.coeffs[a * d_w + w] * pw;
            }
        }
    }
    Ok(j)
}

/// Move the coefficients by `magnitude` along a random unit direction in the null space.
pub fn perturb_nullspace(sol: &BridgeSolution, magnitude: f64, seed: u64) -> Result<BridgeSolution> {
    let basis = match &sol.nullspace_basis {
        Some(b) if b.ncols() > 0 => b,
        _ => {
            return Err(IccError::NoPerturbation(
                "solution is unique (null space dimension 0)".into(),
            ))
        }
    };
    if magnitude == 0.0 {
        return Ok(sol.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = DVector::from_fn(basis.ncols(), |_, _| StandardNormal.sample(&mut rng));
    let dir = basis * xi;
    let dir = &dir / dir.norm();
    Ok(sol.with_coeffs(&sol.coeffs + dir * magnitude))
}

/// Relative tolerance for sample-mode validity: max(SOLVE_TOL, 3 / sqrt(n)),
/// with `n` the rows behind the smallest conditioning cell.
pub fn sample_tol(n: usize) -> f64 {
    (3.0 / (n.max(1) as f64).sqrt()).max(SOLVE_TOL)
}

/// Latent outcome bridge: sum_w H(a, w) p(w | u) = k0(a, u) for every (a, u),
/// built from a population with U visible. Unknowns are ordered as in
/// [`outcome_tables`].
pub fn latent_outcome_bridge(pop: &DiscretePopulation, tol: f64) -> Result<BridgeSolution> {
    let d = pop.dims();
    let pw = pop.cond_matrix(&[Var::W], &[Var::U]).matrix;
    let mut m = DMatrix::zeros(d.d_a * d.d_u, d.d_a * d.d_w);
    let mut b = DVector::zeros(d.d_a * d.d_u);
    for a in 0..d.d_a {
        for u in 0..d.d_u {
            for w in 0..d.d_w {
                m[(a * d.d_u + u, a * d.d_w + w)] = pw[(w, u)];
            }
            b[a * d.d_u + u] = pop.k0()[a][u];
        }
    }
    solve_system(m, b, aw_labels(&pop.treatment_levels(), d.d_w), tol)
}

/// Coefficient table for one bridge family over (a, v-bin) cells.
#[derive(Debug, Clone, Default)]
pub struct BridgeTable {
    /// Keyed by (treatment level, control bin).
    pub cells: BTreeMap<(usize, usize), BridgeSolution>,
    pub arg_dim: usize,
}

impl BridgeTable {
    pub fn all_valid(&self) -> bool {
        self.cells.values().all(|s| s.is_valid())
    }

    pub fn max_relative_residual(&self) -> f64 {
        self.cells
            .values()
            .map(|s| {
                if s.rhs_norm > 0.0 {
                    s.residual_norm / s.rhs_norm
                } else {
                    s.residual_norm
                }
            })
            .fold(0.0, f64::max)
    }

    /// Coefficient at (a, bin, argument); missing cells are an error.
    pub fn value(&self, a: usize, bin: usize, x: usize) -> Result<f64> {
        self.cells
            .get(&(a, bin))
            .map(|s| s.coeffs[x])
            .ok_or_else(|| IccError::CellSupport(format!("no bridge for cell (a-level {a}, bin {bin})")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let labelled: Vec<(String, &BridgeSolution)> = self
            .cells
            .iter()
            .map(|((a, b), s)| (format!("a-level={a};bin={b}"), s))
            .collect();
        write_labeled_csv(path, labelled.iter().map(|(l, s)| (l.as_str(), *s)))
    }
}

fn write_labeled_csv<'a>(path: &Path, rows: impl Iterator<Item = (&'a str, &'a BridgeSolution)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| IccError::Io(std::io::Error::other(e.to_string())))?;
    let io = |e: csv::Error| IccError::Io(std::io::Error::other(e.to_string()));
    w.write_record(["cell", "argument", "coefficient"]).map_err(io)?;
    for (cell, s) in rows {
        for (l, c) in s.labels.iter().zip(s.coeffs.iter()) {
            w.write_record([cell, l.as_str(), &format!("{c}")]).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Outcome bridge on one (a, v) cell: sum_w h(w) p(w|a,v,z) = E[Y|a,v,z] over z.
pub fn solve_h_bridge(
    cell: &str,
    ey_given_z: &CondVector,
    p_w_given_z: &CondTable,
    tol: f64,
) -> Result<BridgeSolution> {
    if p_w_given_z.col_labels != ey_given_z.labels {
        return Err(IccError::Schema(format!("cell {cell}: instrument labels do not align")));
    }
    if !p_w_given_z.defined.iter().any(|&d| d) {
        return Err(IccError::CellSupport(format!("cell {cell} has no instrument support")));
    }
    let m = p_w_given_z.matrix.transpose();
    let (m, b) = select_rows(&m, &ey_given_z.values, &p_w_given_z.defined);
    solve_system(m, b, p_w_given_z.row_labels.clone(), tol)
}

/// Action bridge on one (a, v) cell: sum_z q(z) p(z|a,v,w) = 1 / f(a|v,w) over w.
/// `f_given_w` holds f(a|v,w) for every w present in the v-slice.
pub fn solve_q_bridge(cell: &str, f_given_w: &CondVector, p_z_given_w: &CondTable, tol: f64) -> Result<BridgeSolution> {
    if p_z_given_w.col_labels != f_given_w.labels {
        return Err(IccError::Schema(format!("cell {cell}: proxy labels do not align")));
    }
    if let Some(j) = f_given_w.values.iter().position(|&f| f <= 0.0) {
        return Err(IccError::CommonSupport(format!(
            "cell {cell}: f(a | v, {}) = 0",
            f_given_w.labels[j]
        )));
    }
    if !p_z_given_w.defined.iter().any(|&d| d) {
        return Err(IccError::CellSupport(format!("cell {cell} has no proxy support")));
    }
    let inv = f_given_w.values.map(|f| 1.0 / f);
    let m = p_z_given_w.matrix.transpose();
    let (m, b) = select_rows(&m, &inv, &p_z_given_w.defined);
    solve_system(m, b, p_z_given_w.row_labels.clone(), tol)
}

fn idx_labels(prefix: &str, k: usize) -> Vec<String> {
    (0..k).map(|i| format!("{prefix}={i}")).collect()
}

/// Per-cell tables for the h bridge of cell (a, bin).
pub fn h_cell_tables(c: &Cells, a: usize, bin: usize) -> (CondVector, CondTable) {
    let keep = |i: usize| c.a[i] == a && c.vbin[i] == bin;
    let mut t = crosstab(&c.weight, &c.w, c.d_w, &c.z, c.d_z, keep);
    let mass = normalize_columns(&mut t);
    let mut ey = vec![0.0; c.d_z];
    for i in (0..c.len()).filter(|&i| keep(i)) {
        ey[c.z[i]] += c.weight[i] * c.y[i];
    }
    for z in 0..c.d_z {
        if mass[z] > 0.0 {
            ey[z] /= mass[z];
        }
    }
    (
        CondVector {
            values: DVector::from_vec(ey),
            labels: idx_labels("z", c.d_z),
        },
        CondTable {
            matrix: t,
            row_labels: idx_labels("w", c.d_w),
            col_labels: idx_labels("z", c.d_z),
            defined: mass.iter().map(|&m| m > 0.0).collect(),
        },
    )
}

/// Per-cell tables for the q bridge of cell (a, bin): f(a|bin,w) over the w in
/// the bin, and P(Z | a, bin, w).
pub fn q_cell_tables(c: &Cells, a: usize, bin: usize) -> (CondVector, CondTable) {
    let in_bin = |i: usize| c.vbin[i] == bin;
    let mut slice_mass = vec![0.0; c.d_w];
    let mut a_mass = vec![0.0; c.d_w];
    for i in (0..c.len()).filter(|&i| in_bin(i)) {
        slice_mass[c.w[i]] += c.weight[i];
        if c.a[i] == a {
            a_mass[c.w[i]] += c.weight[i];
        }
    }
    let present: Vec<usize> = (0..c.d_w).filter(|&w| slice_mass[w] > 0.0).collect();
    let f: Vec<f64> = present.iter().map(|&w| a_mass[w] / slice_mass[w]).collect();
    let keep = |i: usize| c.a[i] == a && in_bin(i);
    let full = crosstab(&c.weight, &c.z, c.d_z, &c.w, c.d_w, keep);
    let mut t = full.select_columns(present.iter());
    let mass = normalize_columns(&mut t);
    let labels: Vec<String> = present.iter().map(|w| format!("w={w}")).collect();
    (
        CondVector {
            values: DVector::from_vec(f),
            labels: labels.clone(),
        },
        CondTable {
            matrix: t,
            row_labels: idx_labels("z", c.d_z),
            col_labels: labels,
            defined: mass.iter().map(|&m| m > 0.0).collect(),
        },
    )
}

/// Solve h on every populated (a, bin) cell for the given treatment levels.
pub fn solve_h_bridges(c: &Cells, levels: &[usize], tol: f64) -> Result<BridgeTable> {
    let mut table = BridgeTable {
        cells: BTreeMap::new(),
        arg_dim: c.d_w,
    };
    for &a in levels {
        for bin in 0..c.n_vbins {
            let label = format!("a={};bin={bin}", c.a_levels[a]);
            let (ey, pw) = h_cell_tables(c, a, bin);
            table.cells.insert((a, bin), solve_h_bridge(&label, &ey, &pw, tol)?);
        }
    }
    Ok(table)
}

/// Solve q on every (a, bin) cell for the given treatment levels.
pub fn solve_q_bridges(c: &Cells, levels: &[usize], tol: f64) -> Result<BridgeTable> {
    let mut table = BridgeTable {
        cells: BTreeMap::new(),
        arg_dim: c.d_z,
    };
    for &a in levels {
        for bin in 0..c.n_vbins {
            let label = format!("a={};bin={bin}", c.a_levels[a]);
            let (f, pz) = q_cell_tables(c, a, bin);
            table.cells.insert((a, bin), solve_q_bridge(&label, &f, &pz, tol)?);
        }
    }
    Ok(table)
}

/// Observed tables for the first-stage control bridges.
#[derive(Debug, Clone)]
pub struct ControlTables {
    pub d_z: usize,
    pub d_w0: usize,
    pub d_w1: usize,
    pub a_levels: Vec<f64>,
    /// Per z: P(W1 | z, W0) as d_w1 x d_w0.
    pub p_w1_given_z_w0: Vec<DMatrix<f64>>,
    /// Per z: P(W0 | z, W1) as d_w0 x d_w1.
    pub p_w0_given_z_w1: Vec<DMatrix<f64>>,
    /// Per z: mass of each (w0) and (w1) cell given z.
    pub p_w0_given_z: Vec<Vec<f64>>,
    pub p_w1_given_z: Vec<Vec<f64>>,
    /// `mid_cdf[level][z][w0]` = P(A < a | z, w0) + P(A = a | z, w0) / 2.
    pub mid_cdf: Vec<Vec<Vec<f64>>>,
    /// Marginal p(w1).
    pub p_w1: Vec<f64>,
    /// `a_present[z][level]`: the level occurs with this z.
    pub a_present: Vec<Vec<bool>>,
}

pub fn control_tables(c: &Cells) -> Result<ControlTables> {
    let (w0, d_w0) =
        c.w0.as_ref()
            .map(|(v, d)| (v, *d))
            .ok_or_else(|| IccError::Schema("no proxy_w0 column declared".into()))?;
    let (w1, d_w1) =
        c.w1.as_ref()
            .map(|(v, d)| (v, *d))
            .ok_or_else(|| IccError::Schema("no proxy_w1 column declared".into()))?;
    let d_a = c.a_levels.len();
    let mut joint = vec![DMatrix::<f64>::zeros(d_w1, d_w0); c.d_z];
    let mut a_w0 = vec![DMatrix::<f64>::zeros(d_a, d_w0); c.d_z];
    let mut p_w1 = vec![0.0; d_w1];
    for i in 0..c.len() {
        joint[c.z[i]][(w1[i], w0[i])] += c.weight[i];
        a_w0[c.z[i]][(c.a[i], w0[i])] += c.weight[i];
        p_w1[w1[i]] += c.weight[i];
    }
    let mut t = ControlTables {
        d_z: c.d_z,
        d_w0,
        d_w1,
        a_levels: c.a_levels.clone(),
        p_w1_given_z_w0: Vec::with_capacity(c.d_z),
        p_w0_given_z_w1: Vec::with_capacity(c.d_z),
        p_w0_given_z: Vec::with_capacity(c.d_z),
        p_w1_given_z: Vec::with_capacity(c.d_z),
        mid_cdf: vec![vec![vec![0.0; d_w0]; c.d_z]; d_a],
        p_w1,
        a_present: Vec::with_capacity(c.d_z),
    };
    for z in 0..c.d_z {
        let j = &joint[z];
        let mz = j.sum();
        let mut c1 = j.clone();
        let m_w0 = normalize_columns(&mut c1);
        let mut c0 = j.transpose();
        let m_w1 = normalize_columns(&mut c0);
        t.p_w1_given_z_w0.push(c1);
        t.p_w0_given_z_w1.push(c0);
        let scale = |v: Vec<f64>| v.iter().map(|x| if mz > 0.0 { x / mz } else { 0.0 }).collect();
        t.p_w0_given_z.push(scale(m_w0.clone()));
        t.p_w1_given_z.push(scale(m_w1));
        let mut present = vec![false; d_a];
        for w in 0..d_w0 {
            let mut below = 0.0;
            for a in 0..d_a {
                let p = if m_w0[w] > 0.0 { a_w0[z][(a, w)] / m_w0[w] } else { 0.0 };
                if p > 0.0 {
                    present[a] = true;
                }
                t.mid_cdf[a][z][w] = below + 0.5 * p;
                below += p;
            }
        }
        t.a_present.push(present);
    }
    Ok(t)
}

/// Control bridge tau_a(z, .) for every z: sum_w1 tau p(w1|z,w0) = F(a|z,w0) over w0.
pub fn solve_tau(level: usize, t: &ControlTables, tol: f64) -> Result<Vec<BridgeSolution>> {
    if level >= t.a_levels.len() {
        return Err(IccError::Domain(format!("treatment level {level} out of range")));
    }
    (0..t.d_z)
        .map(|z| {
            let m = t.p_w1_given_z_w0[z].transpose();
            let b = DVector::from_column_slice(&t.mid_cdf[level][z]);
            let keep: Vec<bool> = t.p_w0_given_z[z].iter().map(|&p| p > 0.0).collect();
            let (m, b) = select_rows(&m, &b, &keep);
            solve_system(m, b, idx_labels("w1", t.d_w1), tol)
        })
        .collect()
}

/// Control bridge kappa(z, .) for every z: sum_w0 kappa p(w0|z,w1) = p(w1)/p(w1|z) over w1.
pub fn solve_kappa(t: &ControlTables, tol: f64) -> Result<Vec<BridgeSolution>> {
    (0..t.d_z)
        .map(|z| {
            let m = t.p_w0_given_z_w1[z].transpose();
            let keep: Vec<bool> = t.p_w1_given_z[z].iter().map(|&p| p > 0.0).collect();
            let b = DVector::from_fn(
                t.d_w1,
                |w, _| {
                    if keep[w] {
                        t.p_w1[w] / t.p_w1_given_z[z][w]
                    } else {
                        0.0
                    }
                },
            );
            let (m, b) = select_rows(&m, &b, &keep);
            solve_system(m, b, idx_labels("w0", t.d_w0), tol)
        })
        .collect()
}

/// Control quantity V(a, z) = sum_w1 tau_a(z, w1) p(w1), clipped to [0, 1].
#[derive(Debug, Clone)]
pub struct ControlQuantityTable {
    /// `values[level][z]`; NaN where the level does not occur with z.
    pub values: Vec<Vec<f64>>,
    pub a_levels: Vec<f64>,
    /// Largest distance moved by clipping.
    pub max_clip: f64,
    pub n_clipped: usize,
    /// Largest relative tau residual over the solved cells.
    pub max_tau_residual: f64,
}

impl ControlQuantityTable {
    pub fn lookup(&self, level: usize, z: usize) -> Result<f64> {
        let v = self.values[level][z];
        if v.is_nan() {
            Err(IccError::CommonSupport(format!(
                "no control quantity for a={} at z={z}",
                self.a_levels[level]
            )))
        } else {
            Ok(v)
        }
    }
}

/// Solve tau for every treatment level and tabulate V(a, z) on the (a, z)
/// cells that occur. Fails if any required tau solution is invalid.
pub fn control_quantity_from_tau(t: &ControlTables, tol: f64) -> Result<ControlQuantityTable> {
    let d_a = t.a_levels.len();
    let mut values = vec![vec![f64::NAN; t.d_z]; d_a];
    let (mut max_clip, mut n_clipped, mut max_res) = (0.0_f64, 0usize, 0.0_f64);
    for (level, row) in values.iter_mut().enumerate() {
        let taus = solve_tau(level, t, tol)?;
        for (z, tau) in taus.iter().enumerate() {
            if !t.a_present[z][level] {
                continue;
            }
            if !tau.is_valid() {
                return Err(IccError::Identification(format!(
                    "control bridge tau for a={} at z={z} has residual {:.3e}: W1 not rich enough for U given W0",
                    t.a_levels[level], tau.residual_norm
                )));
            }
            if tau.rhs_norm > 0.0 {
                max_res = max_res.max(tau.residual_norm / tau.rhs_norm);
            }
            let v: f64 = tau.coeffs.iter().zip(&t.p_w1).map(|(a, b)| a * b).sum();
            let clipped = v.clamp(0.0, 1.0);
            if clipped != v {
                n_clipped += 1;
                max_clip = max_clip.max((clipped - v).abs());
            }
            row[z] = clipped;
        }
    }
    Ok(ControlQuantityTable {
        values,
        a_levels: t.a_levels.clone(),
        max_clip,
        n_clipped,
        max_tau_residual: max_res,
    })
}

/// Both sides of the control-bridge identity for arbitrary tau and any valid kappa:
/// sum_w1 tau p(w1) - V(a,z) and E[kappa E[tau - F | z, W0] | z].
pub fn tau_identity_sides(
    t: &ControlTables,
    level: usize,
    z: usize,
    tau: &DVector<f64>,
    kappa: &DVector<f64>,
    v_true: f64,
) -> (f64, f64) {
    let lhs: f64 = tau.iter().zip(&t.p_w1).map(|(a, b)| a * b).sum::<f64>() - v_true;
    let cond_tau = t.p_w1_given_z_w0[z].transpose() * tau;
    let rhs = (0..t.d_w0)
        .map(|w0| t.p_w0_given_z[z][w0] * kappa[w0] * (cond_tau[w0] - t.mid_cdf[level][z][w0]))
        .sum();
    (lhs, rhs)
}

/// Observed (z, w0) rank of P(W1 | z, W0) restricted to declared blocks of
/// (W0 values, W1 values). The minimum over z is a lower bound on how many
/// confounder categories the block can resolve.
pub fn block_rank_diagnostics(t: &ControlTables, blocks: &[(Vec<usize>, Vec<usize>)]) -> Vec<usize> {
    blocks
        .iter()
        .map(|(b0, b1)| {
            (0..t.d_z)
                .map(|z| {
                    let m = t.p_w1_given_z_w0[z].select_rows(b1.iter()).select_columns(b0.iter());
                    crate::linalg::numerical_rank(&crate::linalg::singular_values(&m), 1e-8)
                })
                .min()
                .unwrap_or(0)
        })
        .collect()
}
