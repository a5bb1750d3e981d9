//! Exact discrete populations over (U, Z, A, W) with structural means k0(a, u).

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{cumulative, dirichlet_floored, draw_index};
use crate::data_model::{Column, ContrastSpec, Dataset, VariableRole};
use crate::error::{IccError, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteDims {
    pub d_u: usize,
    pub d_z: usize,
    pub d_a: usize,
    pub d_w: usize,
}

impl DiscreteDims {
    pub fn new(d_u: usize, d_z: usize, d_a: usize, d_w: usize) -> Self {
        DiscreteDims { d_u, d_z, d_a, d_w }
    }

    fn size(&self, v: Var) -> usize {
        match v {
            Var::U => self.d_u,
            Var::Z => self.d_z,
            Var::A => self.d_a,
            Var::W => self.d_w,
        }
    }

    fn cells(&self) -> usize {
        self.d_u * self.d_z * self.d_a * self.d_w
    }
}

/// Axis of the population tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Var {
    U,
    Z,
    A,
    W,
}

/// Stored form: the factors p(u), p(z,a|u), p(w|u). The joint tensor is their
/// product, so W is independent of (A, Z) given U by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Factors {
    dims: DiscreteDims,
    p_u: Vec<f64>,
    p_za_given_u: Vec<Vec<f64>>,
    p_w_given_u: Vec<Vec<f64>>,
    k0: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    endogeneity: Option<Vec<f64>>,
    #[serde(default)]
    y_noise_sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Factors", into = "Factors")]
pub struct DiscretePopulation {
    f: Factors,
    p: Vec<f64>,
}

impl TryFrom<Factors> for DiscretePopulation {
    type Error = IccError;

    fn try_from(f: Factors) -> Result<Self> {
        DiscretePopulation::validate_and_build(f)
    }
}

impl From<DiscretePopulation> for Factors {
    fn from(p: DiscretePopulation) -> Self {
        p.f
    }
}

impl DiscretePopulation {
    /// `p_za_given_u[u][z * d_a + a]`, `p_w_given_u[u][w]`, `k0[a][u]`.
    pub fn from_factors(
        dims: DiscreteDims,
        p_u: Vec<f64>,
        p_za_given_u: Vec<Vec<f64>>,
        p_w_given_u: Vec<Vec<f64>>,
        k0: Vec<Vec<f64>>,
        y_noise_sd: f64,
    ) -> Result<Self> {
        Self::validate_and_build(Factors {
            dims,
            p_u,
            p_za_given_u,
            p_w_given_u,
            k0,
            endogeneity: None,
            y_noise_sd,
        })
    }

    fn validate_and_build(f: Factors) -> Result<Self> {
        let d = f.dims;
        if d.d_u == 0 || d.d_z == 0 || d.d_a == 0 || d.d_w == 0 {
            return Err(IccError::Spec("all population dimensions must be >= 1".into()));
        }
        check_dist("p_u", &f.p_u, d.d_u)?;
        if f.p_za_given_u.len() != d.d_u || f.p_w_given_u.len() != d.d_u {
            return Err(IccError::Spec("conditional tables need one row per u".into()));
        }
        for (u, row) in f.p_za_given_u.iter().enumerate() {
            check_dist(&format!("p_za_given_u[{u}]"), row, d.d_z * d.d_a)?;
        }
        for (u, row) in f.p_w_given_u.iter().enumerate() {
            check_dist(&format!("p_w_given_u[{u}]"), row, d.d_w)?;
        }
        if f.k0.len() != d.d_a || f.k0.iter().any(|r| r.len() != d.d_u) {
            return Err(IccError::Spec("k0 must be a d_a x d_u table".into()));
        }
        if f.k0.iter().flatten().any(|v| !v.is_finite()) {
            return Err(IccError::Spec("k0 has non-finite entries".into()));
        }
        if let Some(e) = &f.endogeneity {
            if e.len() != d.d_a * d.d_z * d.d_u {
                return Err(IccError::Spec("endogeneity table has wrong length".into()));
            }
        }
        if !(f.y_noise_sd >= 0.0) {
            return Err(IccError::Spec("y_noise_sd must be >= 0".into()));
        }
        let mut p = vec![0.0; d.cells()];
        for u in 0..d.d_u {
            for z in 0..d.d_z {
                for a in 0..d.d_a {
                    for w in 0..d.d_w {
                        p[idx(&d, u, z, a, w)] = f.p_u[u] * f.p_za_given_u[u][z * d.d_a + a] * f.p_w_given_u[u][w];
                    }
                }
            }
        }
        Ok(DiscretePopulation { f, p })
    }

    pub fn dims(&self) -> DiscreteDims {
        self.f.dims
    }

    pub fn tensor(&self) -> &[f64] {
        &self.p
    }

    pub fn prob(&self, u: usize, z: usize, a: usize, w: usize) -> f64 {
        self.p[idx(&self.f.dims, u, z, a, w)]
    }

    pub fn p_u(&self) -> &[f64] {
        &self.f.p_u
    }

    /// `k0[a][u]`.
    pub fn k0(&self) -> &[Vec<f64>] {
        &self.f.k0
    }

    pub fn y_noise_sd(&self) -> f64 {
        self.f.y_noise_sd
    }

    pub fn with_noise(mut self, sd: f64) -> Self {
        self.f.y_noise_sd = sd;
        self
    }

    /// Treatment levels are the codes `0..d_a`.
    pub fn treatment_levels(&self) -> Vec<f64> {
        (0..self.f.dims.d_a).map(|a| a as f64).collect()
    }

    /// Mean outcome in cell (u, z, a): k0(a,u) plus the endogeneity term.
    pub fn y_mean(&self, u: usize, z: usize, a: usize) -> f64 {
        let d = &self.f.dims;
        let e = self
            .f
            .endogeneity
            .as_ref()
            .map_or(0.0, |e| e[(a * d.d_z + z) * d.d_u + u]);
        self.f.k0[a][u] + e
    }

    /// Add non-common confounding: a selection term e(a,z,u) drawn uniform on
    /// `[-scale, scale]` and centred so that `sum_a p(a|z,u) e(a,z,u) = 0`.
    pub fn with_endogeneity(mut self, seed: u64, scale: f64) -> Self {
        use rand::Rng;
        let d = self.f.dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = vec![0.0; d.d_a * d.d_z * d.d_u];
        for z in 0..d.d_z {
            for u in 0..d.d_u {
                let row = &self.f.p_za_given_u[u][z * d.d_a..(z + 1) * d.d_a];
                let mass: f64 = row.iter().sum();
                let raw: Vec<f64> = (0..d.d_a).map(|_| rng.random_range(-scale..=scale)).collect();
                let centre = if mass > 0.0 {
                    raw.iter().zip(row).map(|(r, p)| r * p).sum::<f64>() / mass
                } else {
                    0.0
                };
                for a in 0..d.d_a {
                    e[(a * d.d_z + z) * d.d_u + u] = raw[a] - centre;
                }
            }
        }
        self.f.endogeneity = Some(e);
        self
    }

    pub fn has_endogeneity(&self) -> bool {
        self.f.endogeneity.is_some()
    }

    /// Iterate over positive-mass atoms `(u, z, a, w, prob, E[Y | atom])`.
    pub fn atoms(&self) -> impl Iterator<Item = (usize, usize, usize, usize, f64, f64)> + '_ {
        let d = self.f.dims;
        (0..d.cells()).filter_map(move |i| {
            let p = self.p[i];
            if p <= 0.0 {
                return None;
            }
            let (u, z, a, w) = unidx(&d, i);
            Some((u, z, a, w, p, self.y_mean(u, z, a)))
        })
    }

    fn cell_of(&self, vars: &[Var], u: usize, z: usize, a: usize, w: usize) -> usize {
        let d = &self.f.dims;
        vars.iter().fold(0, |acc, v| {
            let x = match v {
                Var::U => u,
                Var::Z => z,
                Var::A => a,
                Var::W => w,
            };
            acc * d.size(*v) + x
        })
    }

    fn n_cells(&self, vars: &[Var]) -> usize {
        vars.iter().map(|v| self.f.dims.size(*v)).product()
    }

    /// Marginal probability of each joint cell of `vars` (mixed radix, first var most significant).
    pub fn marginal(&self, vars: &[Var]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cells(vars)];
        let d = self.f.dims;
        for (i, &p) in self.p.iter().enumerate() {
            let (u, z, a, w) = unidx(&d, i);
            out[self.cell_of(vars, u, z, a, w)] += p;
        }
        out
    }

    /// Conditional distribution P(target | given); rows are target cells,
    /// columns are given cells. Zero-mass columns are left at zero and flagged.
    pub fn cond_matrix(&self, target: &[Var], given: &[Var]) -> LabeledMatrix {
        let nt = self.n_cells(target);
        let ng = self.n_cells(given);
        let mut m = DMatrix::zeros(nt, ng);
        let d = self.f.dims;
        for (i, &p) in self.p.iter().enumerate() {
            let (u, z, a, w) = unidx(&d, i);
            m[(self.cell_of(target, u, z, a, w), self.cell_of(given, u, z, a, w))] += p;
        }
        let col_mass: Vec<f64> = (0..ng).map(|j| m.column(j).sum()).collect();
        for j in 0..ng {
            if col_mass[j] > 0.0 {
                m.column_mut(j).scale_mut(1.0 / col_mass[j]);
            }
        }
        LabeledMatrix {
            row_vars: target.to_vec(),
            col_vars: given.to_vec(),
            row_labels: labels(&self.f.dims, target),
            col_labels: labels(&self.f.dims, given),
            defined: col_mass.iter().map(|&c| c > 0.0).collect(),
            col_mass,
            matrix: m,
        }
    }

    /// E[Y | given] per given cell; undefined cells are NaN.
    pub fn cond_mean_y(&self, given: &[Var]) -> Vec<f64> {
        let ng = self.n_cells(given);
        let mut num = vec![0.0; ng];
        let mut den = vec![0.0; ng];
        for (u, z, a, w, p, y) in self.atoms() {
            let j = self.cell_of(given, u, z, a, w);
            num[j] += p * y;
            den[j] += p;
        }
        num.iter()
            .zip(&den)
            .map(|(n, d)| if *d > 0.0 { n / d } else { f64::NAN })
            .collect()
    }
}

fn check_dist(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(IccError::Spec(format!("{name} has length {}, expected {len}", v.len())));
    }
    if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(IccError::Spec(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(IccError::Spec(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

fn idx(d: &DiscreteDims, u: usize, z: usize, a: usize, w: usize) -> usize {
    ((u * d.d_z + z) * d.d_a + a) * d.d_w + w
}

fn unidx(d: &DiscreteDims, i: usize) -> (usize, usize, usize, usize) {
    let w = i % d.d_w;
    let r = i / d.d_w;
    let a = r % d.d_a;
    let r = r / d.d_a;
    let z = r % d.d_z;
    (r / d.d_z, z, a, w)
}

fn labels(d: &DiscreteDims, vars: &[Var]) -> Vec<Vec<usize>> {
    let sizes: Vec<usize> = vars.iter().map(|v| d.size(*v)).collect();
    let total: usize = sizes.iter().product();
    (0..total)
        .map(|mut c| {
            let mut lab = vec![0; sizes.len()];
            for k in (0..sizes.len()).rev() {
                lab[k] = c % sizes[k];
                c /= sizes[k];
            }
            lab
        })
        .collect()
}

/// Conditional-probability matrix with cell labels on both axes.
#[derive(Debug, Clone)]
pub struct LabeledMatrix {
    pub row_vars: Vec<Var>,
    pub col_vars: Vec<Var>,
    pub row_labels: Vec<Vec<usize>>,
    pub col_labels: Vec<Vec<usize>>,
    pub matrix: DMatrix<f64>,
    /// `false` where the conditioning cell has zero mass.
    pub defined: Vec<bool>,
    pub col_mass: Vec<f64>,
}

/// Numerical rank of `m` and whether it has full column rank.
pub fn completeness_rank(m: &DMatrix<f64>, tol: f64) -> Result<(usize, bool)> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(IccError::Domain("empty matrix has no rank".into()));
    }
    let s = linalg::singular_values(m);
    let r = linalg::numerical_rank(&s, tol);
    Ok((r, r == m.ncols()))
}

pub fn random_population(dims: DiscreteDims, seed: u64, support_floor: f64) -> Result<DiscretePopulation> {
    use rand::Rng;
    let cells = dims.cells();
    if dims.d_u == 0 || dims.d_z == 0 || dims.d_a == 0 || dims.d_w == 0 {
        return Err(IccError::Spec("all population dimensions must be >= 1".into()));
    }
    if !(0.0..=0.5 / cells as f64).contains(&support_floor) {
        return Err(IccError::Spec(format!(
            "support_floor {support_floor} outside [0, {}]",
            0.5 / cells as f64
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p_u = dirichlet_floored(&mut rng, dims.d_u, support_floor);
    let p_za_given_u = (0..dims.d_u)
        .map(|_| dirichlet_floored(&mut rng, dims.d_z * dims.d_a, support_floor))
        .collect();
    let p_w_given_u = (0..dims.d_u)
        .map(|_| dirichlet_floored(&mut rng, dims.d_w, support_floor))
        .collect();
    let k0 = (0..dims.d_a)
        .map(|_| (0..dims.d_u).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    DiscretePopulation::from_factors(dims, p_u, p_za_given_u, p_w_given_u, k0, 0.0)
}

/// J = sum_u p(u) sum_a pi(a) k0(a, u).
pub fn true_j(pop: &DiscretePopulation, c: &ContrastSpec) -> Result<f64> {
    let weights = c.weights_on_levels(&pop.treatment_levels())?;
    let mut j = 0.0;
    for (u, pu) in pop.p_u().iter().enumerate() {
        for (a, wa) in weights.iter().enumerate() {
            j += pu * wa * pop.k0()[a][u];
        }
    }
    Ok(j)
}

/// i.i.d. draws with columns y, a, z, w and the latent u.
pub fn sample_discrete(pop: &DiscretePopulation, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(IccError::Domain("sample size must be >= 1".into()));
    }
    let d = pop.dims();
    let cum = cumulative(pop.tensor());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, pop.y_noise_sd()).map_err(|e| IccError::Spec(format!("outcome noise: {e}")))?;
    let mut cols: [Vec<usize>; 4] = Default::default();
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let (u, z, a, w) = unidx(&d, draw_index(&mut rng, &cum));
        let eps = if pop.y_noise_sd() > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        y.push(pop.y_mean(u, z, a) + eps);
        for (col, v) in cols.iter_mut().zip([u, z, a, w]) {
            col.push(v);
        }
    }
    let [u, z, a, w] = cols;
    Dataset::new(
        vec![
            Column::continuous("y", VariableRole::Outcome, y),
            Column::categorical("a", VariableRole::Treatment, &a, d.d_a),
            Column::categorical("z", VariableRole::Instrument, &z, d.d_z),
            Column::categorical("w", VariableRole::OutcomeProxy, &w, d.d_w),
            Column::categorical("u", VariableRole::LatentConfounder, &u, d.d_u),
        ],
        true,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::ate_contrast;

    #[test]
    fn normalized_and_deterministic() {
        let dims = DiscreteDims::new(2, 4, 2, 3);
        let p1 = random_population(dims, 7, 1e-4).unwrap();
        let p2 = random_population(dims, 7, 1e-4).unwrap();
        assert!((p1.tensor().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p1.tensor(), p2.tensor());
        assert!(p1.tensor().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn conditional_columns_sum_to_one() {
        let pop = random_population(DiscreteDims::new(2, 4, 2, 3), 7, 1e-4).unwrap();
        let m = pop.cond_matrix(&[Var::A, Var::W], &[Var::Z]);
        assert_eq!(m.matrix.shape(), (6, 4));
        for j in 0..4 {
            assert!((m.matrix.column(j).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_mass_column_flagged() {
        let dims = DiscreteDims::new(1, 2, 1, 1);
        let pop = DiscretePopulation::from_factors(
            dims,
            vec![1.0],
            vec![vec![1.0, 0.0]],
            vec![vec![1.0]],
            vec![vec![0.0]],
            0.0,
        )
        .unwrap();
        let m = pop.cond_matrix(&[Var::A], &[Var::Z]);
        assert_eq!(m.defined, vec![true, false]);
    }

    #[test]
    fn uniform_independent_proxy() {
        let dims = DiscreteDims::new(2, 1, 1, 2);
        let pop = DiscretePopulation::from_factors(
            dims,
            vec![0.5, 0.5],
            vec![vec![1.0], vec![1.0]],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            vec![vec![0.0, 0.0]],
            0.0,
        )
        .unwrap();
        let m = pop.cond_matrix(&[Var::W], &[Var::U]);
        assert!(m.matrix.iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn linear_structural_function() {
        let mut pop = random_population(DiscreteDims::new(3, 5, 2, 4), 1, 1e-4).unwrap();
        pop.f.k0 = vec![vec![0.0; 3], vec![1.0; 3]];
        let j = true_j(&pop, &ate_contrast(1.0, 0.0).unwrap()).unwrap();
        assert!((j - 1.0).abs() < 1e-15);
        let zero = ContrastSpec::new(
            crate::data_model::ContrastKind::DiscreteWeights,
            vec![0.0, 1.0],
            vec![0.0, 0.0],
        )
        .unwrap();
        assert_eq!(true_j(&pop, &zero).unwrap(), 0.0);
        assert!(true_j(&pop, &ate_contrast(5.0, 0.0).unwrap()).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(completeness_rank(&DMatrix::identity(3, 3), 1e-10).unwrap(), (3, true));
        let m = DMatrix::from_element(2, 2, 0.25);
        assert_eq!(completeness_rank(&m, 1e-10).unwrap(), (1, false));
        assert!(completeness_rank(&DMatrix::zeros(0, 0), 1e-10).is_err());
    }

    #[test]
    fn endogeneity_keeps_instrument_moment() {
        let pop = random_population(DiscreteDims::new(2, 3, 2, 3), 4, 1e-4)
            .unwrap()
            .with_endogeneity(9, 1.0);
        // E[Y | Z, U] does not move
        let d = pop.dims();
        for u in 0..d.d_u {
            for z in 0..d.d_z {
                let (mut num, mut base, mut den) = (0.0, 0.0, 0.0);
                for a in 0..d.d_a {
                    let p = pop.f.p_za_given_u[u][z * d.d_a + a];
                    num += p * pop.y_mean(u, z, a);
                    base += p * pop.k0()[a][u];
                    den += p;
                }
                assert!((num / den - base / den).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_sample_is_exact() {
        let pop = random_population(DiscreteDims::new(2, 4, 2, 3), 7, 1e-4).unwrap();
        let ds = sample_discrete(&pop, 200, 5).unwrap();
        let a = ds.column("a").unwrap().codes().unwrap();
        let u = ds.column("u").unwrap().codes().unwrap();
        for i in 0..ds.n() {
            assert_eq!(ds.y()[i], pop.k0()[a[i]][u[i]]);
        }
        assert_eq!(ds, sample_discrete(&pop, 200, 5).unwrap());
    }

    #[test]
    fn toml_roundtrip() {
        let pop = random_population(DiscreteDims::new(2, 3, 2, 2), 3, 1e-4).unwrap();
        let s = toml::to_string(&pop).unwrap();
        let back: DiscretePopulation = toml::from_str(&s).unwrap();
        assert_eq!(back.tensor(), pop.tensor());
    }
}
