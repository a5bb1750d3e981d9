//! Weighted cell data shared by population and sample evaluation.
//!
//! A population is a list of atoms with probability weights and conditional
//! outcome means; a sample is a list of rows with weight 1/n. Every table and
//! every moment function is computed from this one representation.

use nalgebra::{DMatrix, DVector};

use crate::data_model::{joint_codes, Dataset, VariableRole};
use crate::error::{IccError, Result};
use crate::synth::{DiscretePopulation, FirstStagePopulation};

/// Discrete-coded observations with weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Cells {
    pub weight: Vec<f64>,
    pub y: Vec<f64>,
    /// Treatment level index into `a_levels`.
    pub a: Vec<usize>,
    pub a_levels: Vec<f64>,
    pub z: Vec<usize>,
    pub d_z: usize,
    /// Outcome proxy (joint code when several columns).
    pub w: Vec<usize>,
    pub d_w: usize,
    pub w0: Option<(Vec<usize>, usize)>,
    pub w1: Option<(Vec<usize>, usize)>,
    pub u: Option<(Vec<usize>, usize)>,
    /// Control bin per row; a single bin when no control is attached.
    pub vbin: Vec<usize>,
    pub n_vbins: usize,
}

impl Cells {
    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    /// Same data with new control bins.
    pub fn with_bins(&self, vbin: Vec<usize>) -> Result<Cells> {
        if vbin.len() != self.len() {
            return Err(IccError::Dimension("bin vector length differs from data".into()));
        }
        let n_vbins = vbin.iter().max().map_or(1, |m| m + 1);
        Ok(Cells {
            vbin,
            n_vbins,
            ..self.clone()
        })
    }

    /// Same data with the observed proxy replaced by `w` (e.g. only W1).
    pub fn with_proxy(&self, w: Vec<usize>, d_w: usize) -> Cells {
        Cells { w, d_w, ..self.clone() }
    }

    pub fn u_codes(&self) -> Result<(&[usize], usize)> {
        self.u
            .as_ref()
            .map(|(u, d)| (u.as_slice(), *d))
            .ok_or_else(|| IccError::Schema("latent U is not available (oracle mode only)".into()))
    }

    pub fn level_of(&self, a: f64) -> Option<usize> {
        self.a_levels.iter().position(|&l| l == a)
    }

    /// Population atoms of a discrete population; one control bin.
    pub fn from_discrete_population(pop: &DiscretePopulation) -> Cells {
        let d = pop.dims();
        let mut c = Cells::empty(pop.treatment_levels(), d.d_z, d.d_w);
        let mut u = Vec::new();
        for (uu, z, a, w, p, y) in pop.atoms() {
            c.weight.push(p);
            c.y.push(y);
            c.a.push(a);
            c.z.push(z);
            c.w.push(w);
            u.push(uu);
        }
        c.vbin = vec![0; c.weight.len()];
        c.u = Some((u, d.d_u));
        c
    }

    /// Population atoms of a first-stage population. W is the joint (W0, W1)
    /// code `w0 * d_w1 + w1`. Also returns the grid index of each atom.
    pub fn from_first_stage(fs: &FirstStagePopulation) -> (Cells, Vec<usize>) {
        let d_w = fs.d_w0() * fs.d_w1();
        let mut c = Cells::empty(fs.levels().to_vec(), fs.d_z(), d_w);
        let (mut u, mut w0, mut w1, mut g) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for at in fs.atoms() {
            c.weight.push(at.prob);
            c.y.push(at.y_mean);
            c.a.push(at.a_level);
            c.z.push(at.z);
            c.w.push(at.w0 * fs.d_w1() + at.w1);
            u.push(at.u);
            w0.push(at.w0);
            w1.push(at.w1);
            g.push(at.g);
        }
        c.vbin = vec![0; c.weight.len()];
        c.u = Some((u, fs.d_u()));
        c.w0 = Some((w0, fs.d_w0()));
        c.w1 = Some((w1, fs.d_w1()));
        (c, g)
    }

    /// Sample rows with weight 1/n. Instruments and proxies must be categorical
    /// and contiguously coded. The outcome proxy is the joint code of all
    /// `outcome_proxy` columns, or of (W0, W1) when none are declared.
    pub fn from_dataset(ds: &Dataset) -> Result<Cells> {
        let n = ds.n();
        if n == 0 {
            return Err(IccError::Schema("dataset has no rows".into()));
        }
        let a_col = ds.treatment();
        let a_vals: Vec<f64> = match a_col.labels() {
            Some(labels) => a_col.codes()?.iter().map(|&c| labels[c] as f64).collect(),
            None => a_col.values.clone(),
        };
        let mut a_levels = a_vals.clone();
        a_levels.sort_by(f64::total_cmp);
        a_levels.dedup();
        let a: Vec<usize> = a_vals
            .iter()
            .map(|v| a_levels.binary_search_by(|x| x.total_cmp(v)).expect("level"))
            .collect();
        let (z, d_z) = joint_codes(&ds.instruments()?)?;
        let w0 = role_codes(ds, VariableRole::ProxyW0)?;
        let w1 = role_codes(ds, VariableRole::ProxyW1)?;
        let (w, d_w) = match role_codes(ds, VariableRole::OutcomeProxy)? {
            Some(x) => x,
            None => match (&w0, &w1) {
                (Some((c0, d0)), Some((c1, d1))) => (c0.iter().zip(c1).map(|(a, b)| a * d1 + b).collect(), d0 * d1),
                _ => (vec![0; n], 1),
            },
        };
        let u = role_codes(ds, VariableRole::LatentConfounder)?;
        Ok(Cells {
            weight: vec![1.0 / n as f64; n],
            y: ds.y(),
            a,
            a_levels,
            z,
            d_z,
            w,
            d_w,
            w0,
            w1,
            u,
            vbin: vec![0; n],
            n_vbins: 1,
        })
    }

    fn empty(a_levels: Vec<f64>, d_z: usize, d_w: usize) -> Cells {
        Cells {
            weight: Vec::new(),
            y: Vec::new(),
            a: Vec::new(),
            a_levels,
            z: Vec::new(),
            d_z,
            w: Vec::new(),
            d_w,
            w0: None,
            w1: None,
            u: None,
            vbin: Vec::new(),
            n_vbins: 1,
        }
    }
}

fn role_codes(ds: &Dataset, role: VariableRole) -> Result<Option<(Vec<usize>, usize)>> {
    let cols = ds.with_role(role);
    if cols.is_empty() {
        return Ok(None);
    }
    joint_codes(&cols).map(Some)
}

/// Weighted contingency table `t[r][c]` over the rows passing `keep`.
pub fn crosstab(
    weight: &[f64],
    rows: &[usize],
    n_rows: usize,
    cols: &[usize],
    n_cols: usize,
    keep: impl Fn(usize) -> bool,
) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(n_rows, n_cols);
    for i in 0..weight.len() {
        if keep(i) {
            t[(rows[i], cols[i])] += weight[i];
        }
    }
    t
}

/// Weighted mass and weighted sum of `y` per key.
pub fn group_sums(
    weight: &[f64],
    y: &[f64],
    keys: &[usize],
    n_keys: usize,
    keep: impl Fn(usize) -> bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut mass = vec![0.0; n_keys];
    let mut sum = vec![0.0; n_keys];
    for i in 0..weight.len() {
        if keep(i) {
            mass[keys[i]] += weight[i];
            sum[keys[i]] += weight[i] * y[i];
        }
    }
    (mass, sum)
}

/// Normalize each column of `t` to sum to one; returns column masses.
/// Zero-mass columns stay zero.
pub fn normalize_columns(t: &mut DMatrix<f64>) -> Vec<f64> {
    let mass: Vec<f64> = (0..t.ncols()).map(|j| t.column(j).sum()).collect();
    for (j, &m) in mass.iter().enumerate() {
        if m > 0.0 {
            t.column_mut(j).scale_mut(1.0 / m);
        }
    }
    mass
}

/// Add `alpha` to every cell of a count table (Laplace smoothing).
pub fn smooth(t: &mut DMatrix<f64>, alpha: f64) {
    if alpha > 0.0 {
        t.add_scalar_mut(alpha);
    }
}

/// Weighted mean of `f(i)` over all rows.
pub fn weighted_mean(weight: &[f64], f: impl Fn(usize) -> f64) -> f64 {
    weight.iter().enumerate().map(|(i, w)| w * f(i)).sum()
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{random_population, sample_discrete, DiscreteDims, Var};

    #[test]
    fn population_tables_match_tensor() {
        let pop = random_population(DiscreteDims::new(2, 4, 2, 3), 7, 1e-4).unwrap();
        let c = Cells::from_discrete_population(&pop);
        assert!((c.weight.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let aw: Vec<usize> = c.a.iter().zip(&c.w).map(|(a, w)| a * 3 + w).collect();
        let mut t = crosstab(&c.weight, &aw, 6, &c.z, 4, |_| true);
        normalize_columns(&mut t);
        let m = pop.cond_matrix(&[Var::A, Var::W], &[Var::Z]);
        assert!((t - m.matrix).amax() < 1e-14);
    }

    #[test]
    fn sample_cells_recover_codes() {
        let pop = random_population(DiscreteDims::new(2, 4, 2, 3), 7, 1e-4).unwrap();
        let ds = sample_discrete(&pop, 100, 1).unwrap();
        let c = Cells::from_dataset(&ds).unwrap();
        assert_eq!(c.a_levels, vec![0.0, 1.0]);
        assert_eq!(c.d_z, 4);
        assert_eq!(c.d_w, 3);
        assert_eq!(c.u.as_ref().unwrap().1, 2);
        assert_eq!(c.z, ds.column("z").unwrap().codes().unwrap());
    }
}
