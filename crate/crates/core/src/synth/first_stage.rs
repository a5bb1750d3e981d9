//! Monotone first-stage populations: A = h(Z, m(U, eta)) on a finite eta grid.
//!
//! The generator uses an integer lattice. With shifts t_u = u the index
//! m(u, g) = g + t_u takes L = G + d_U - 1 values. Instruments come in K = L + 1
//! classes of R members, and class k maps m to a = m + 1 - k. Every m is then
//! reachable with both a = 0 and a = 1, so the ATE(1, 0) contrast has common
//! support, and every population identity holds exactly on the grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{cumulative, dirichlet_floored, draw_index};
use crate::data_model::{Column, ContrastSpec, Dataset, VariableRole};
use crate::error::{IccError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FirstStageOptions {
    pub d_u: usize,
    /// Number of eta grid points G.
    pub grid: usize,
    /// Instruments per lattice class R.
    pub class_size: usize,
    pub d_w0: usize,
    pub d_w1: usize,
    pub support_floor: f64,
    /// Draw p(w0, w1 | u) jointly instead of as a product.
    pub dependent_w: bool,
    pub y_noise_sd: f64,
}

impl Default for FirstStageOptions {
    fn default() -> Self {
        FirstStageOptions {
            d_u: 2,
            grid: 101,
            class_size: 3,
            d_w0: 3,
            d_w1: 3,
            support_floor: 1e-4,
            dependent_w: false,
            y_noise_sd: 0.0,
        }
    }
}

impl FirstStageOptions {
    /// Small grid whose atoms 21 equal-mass bins can still resolve.
    pub fn oracle_fixture() -> Self {
        FirstStageOptions {
            grid: 9,
            ..Default::default()
        }
    }
}

/// Serialized form of a first-stage population.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tables {
    grid: usize,
    p_u: Vec<f64>,
    p_z_given_u: Vec<Vec<f64>>,
    d_w0: usize,
    d_w1: usize,
    /// `p_w_given_u[u][w0 * d_w1 + w1]`
    p_w_given_u: Vec<Vec<f64>>,
    /// `m_form[u][g]` is an index into the shared m axis.
    m_form: Vec<Vec<usize>>,
    /// `h_form[z][m]` is the treatment value.
    h_form: Vec<Vec<f64>>,
    /// `k0v[level][g][u]` over the sorted distinct treatment values.
    k0v: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    y_noise_sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Tables", into = "Tables")]
pub struct FirstStagePopulation {
    t: Tables,
    levels: Vec<f64>,
    /// `a_index[(z * d_u + u) * grid + g]`
    a_index: Vec<usize>,
}

impl TryFrom<Tables> for FirstStagePopulation {
    type Error = IccError;
    fn try_from(t: Tables) -> Result<Self> {
        FirstStagePopulation::build(t)
    }
}

impl From<FirstStagePopulation> for Tables {
    fn from(p: FirstStagePopulation) -> Self {
        p.t
    }
}

/// One positive-mass atom of a first-stage population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FsAtom {
    pub u: usize,
    pub g: usize,
    pub z: usize,
    pub w0: usize,
    pub w1: usize,
    pub a_level: usize,
    pub prob: f64,
    pub y_mean: f64,
}

impl FirstStagePopulation {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: usize,
        p_u: Vec<f64>,
        p_z_given_u: Vec<Vec<f64>>,
        d_w0: usize,
        d_w1: usize,
        p_w_given_u: Vec<Vec<f64>>,
        m_form: Vec<Vec<usize>>,
        h_form: Vec<Vec<f64>>,
        k0v: Vec<Vec<Vec<f64>>>,
        y_noise_sd: f64,
    ) -> Result<Self> {
        Self::build(Tables {
            grid,
            p_u,
            p_z_given_u,
            d_w0,
            d_w1,
            p_w_given_u,
            m_form,
            h_form,
            k0v,
            y_noise_sd,
        })
    }

    fn build(t: Tables) -> Result<Self> {
        let d_u = t.p_u.len();
        let d_z = t.h_form.len();
        if d_u == 0 || d_z == 0 || t.grid == 0 || t.d_w0 == 0 || t.d_w1 == 0 {
            return Err(IccError::Spec("first-stage dimensions must be >= 1".into()));
        }
        check_dist("p_u", &t.p_u)?;
        if t.p_z_given_u.len() != d_u || t.p_w_given_u.len() != d_u || t.m_form.len() != d_u {
            return Err(IccError::Spec("per-u tables need one row per u".into()));
        }
        for row in &t.p_z_given_u {
            if row.len() != d_z {
                return Err(IccError::Spec("p_z_given_u rows must have d_z entries".into()));
            }
            check_dist("p_z_given_u", row)?;
        }
        for row in &t.p_w_given_u {
            if row.len() != t.d_w0 * t.d_w1 {
                return Err(IccError::Spec("p_w_given_u rows must have d_w0*d_w1 entries".into()));
            }
            check_dist("p_w_given_u", row)?;
        }
        let n_m = t.h_form[0].len();
        for (u, row) in t.m_form.iter().enumerate() {
            if row.len() != t.grid {
                return Err(IccError::Spec(format!("m_form[{u}] must have {} entries", t.grid)));
            }
            if row.iter().any(|&m| m >= n_m) {
                return Err(IccError::Spec(format!("m_form[{u}] indexes outside the m axis")));
            }
            if let Some(g) = row.windows(2).position(|w| w[0] >= w[1]) {
                return Err(IccError::Spec(format!(
                    "m_form not strictly increasing in eta for u={u} at grid point {g}"
                )));
            }
        }
        for (z, row) in t.h_form.iter().enumerate() {
            if row.len() != n_m {
                return Err(IccError::Spec("h_form rows must share the m axis".into()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(IccError::Spec("h_form has non-finite entries".into()));
            }
            if let Some(m) = row.windows(2).position(|w| w[0] >= w[1]) {
                return Err(IccError::Spec(format!(
                    "h_form not strictly increasing in m for z={z} at m index {m}"
                )));
            }
        }
        let mut levels: Vec<f64> = t.h_form.iter().flatten().copied().collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        if t.k0v.len() != levels.len()
            || t.k0v
                .iter()
                .any(|r| r.len() != t.grid || r.iter().any(|c| c.len() != d_u))
        {
            return Err(IccError::Spec(format!(
                "k0v must be a {} x {} x {d_u} table",
                levels.len(),
                t.grid
            )));
        }
        let mut a_index = vec![0; d_z * d_u * t.grid];
        for z in 0..d_z {
            for u in 0..d_u {
                for g in 0..t.grid {
                    let a = t.h_form[z][t.m_form[u][g]];
                    a_index[(z * d_u + u) * t.grid + g] =
                        levels.binary_search_by(|x| x.total_cmp(&a)).expect("level present");
                }
            }
        }
        Ok(FirstStagePopulation { t, levels, a_index })
    }

    pub fn generate(opts: &FirstStageOptions, seed: u64) -> Result<Self> {
        let FirstStageOptions {
            d_u,
            grid,
            class_size,
            d_w0,
            d_w1,
            support_floor,
            dependent_w,
            y_noise_sd,
        } = *opts;
        if d_u == 0 || grid < 2 || class_size == 0 || d_w0 == 0 || d_w1 == 0 {
            return Err(IccError::Spec(
                "need d_u, class_size, d_w0, d_w1 >= 1 and grid >= 2".into(),
            ));
        }
        let n_m = grid + d_u - 1;
        let classes = n_m + 1;
        let d_z = classes * class_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p_u = dirichlet_floored(&mut rng, d_u, support_floor);
        let p_z_given_u: Vec<Vec<f64>> = (0..d_u)
            .map(|_| dirichlet_floored(&mut rng, d_z, support_floor))
            .collect();
        let p_w_given_u: Vec<Vec<f64>> = (0..d_u)
            .map(|_| {
                if dependent_w {
                    dirichlet_floored(&mut rng, d_w0 * d_w1, support_floor)
                } else {
                    let p0 = dirichlet_floored(&mut rng, d_w0, support_floor);
                    let p1 = dirichlet_floored(&mut rng, d_w1, support_floor);
                    p0.iter().flat_map(|a| p1.iter().map(move |b| a * b)).collect()
                }
            })
            .collect();
        let m_form: Vec<Vec<usize>> = (0..d_u).map(|u| (0..grid).map(|g| g + u).collect()).collect();
        let h_form: Vec<Vec<f64>> = (0..d_z)
            .map(|z| {
                let k = (z / class_size) as f64;
                (0..n_m).map(|m| m as f64 + 1.0 - k).collect()
            })
            .collect();
        let n_levels = 2 * n_m;
        let k0v = (0..n_levels)
            .map(|_| {
                (0..grid)
                    .map(|_| (0..d_u).map(|_| rng.random_range(-1.0..=1.0)).collect())
                    .collect()
            })
            .collect();
        Self::new(
            grid,
            p_u,
            p_z_given_u,
            d_w0,
            d_w1,
            p_w_given_u,
            m_form,
            h_form,
            k0v,
            y_noise_sd,
        )
    }

    pub fn d_u(&self) -> usize {
        self.t.p_u.len()
    }

    pub fn d_z(&self) -> usize {
        self.t.h_form.len()
    }

    pub fn d_w0(&self) -> usize {
        self.t.d_w0
    }

    pub fn d_w1(&self) -> usize {
        self.t.d_w1
    }

    pub fn grid(&self) -> usize {
        self.t.grid
    }

    pub fn p_u(&self) -> &[f64] {
        &self.t.p_u
    }

    pub fn y_noise_sd(&self) -> f64 {
        self.t.y_noise_sd
    }

    /// Sorted distinct treatment values.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Treatment level index for (z, u, g).
    pub fn a_level(&self, z: usize, u: usize, g: usize) -> usize {
        self.a_index[(z * self.d_u() + u) * self.t.grid + g]
    }

    pub fn k0v(&self, level: usize, g: usize, u: usize) -> f64 {
        self.t.k0v[level][g][u]
    }

    /// Grid quantile of eta, which is also the oracle control V = F(A | Z, U).
    pub fn eta(&self, g: usize) -> f64 {
        (g as f64 + 0.5) / self.t.grid as f64
    }

    /// Mid-distribution function P(A < a | z, u) + P(A = a | z, u) / 2.
    pub fn mid_cdf(&self, level: usize, z: usize, u: usize) -> f64 {
        let mut below = 0usize;
        let mut at = 0usize;
        for g in 0..self.t.grid {
            let l = self.a_level(z, u, g);
            if l < level {
                below += 1;
            } else if l == level {
                at += 1;
            }
        }
        (below as f64 + 0.5 * at as f64) / self.t.grid as f64
    }

    /// Control quantity sum_u p(u) F(a | z, u).
    pub fn v43(&self, level: usize, z: usize) -> f64 {
        (0..self.d_u()).map(|u| self.t.p_u[u] * self.mid_cdf(level, z, u)).sum()
    }

    /// Generalised propensity f(a | V = eta_g, U = u).
    pub fn propensity(&self, level: usize, g: usize, u: usize) -> f64 {
        (0..self.d_z())
            .filter(|&z| self.a_level(z, u, g) == level)
            .map(|z| self.t.p_z_given_u[u][z])
            .sum()
    }

    /// Effect sum_u p(u) E_eta[ sum_a pi(a) k0v(a, eta, u) ].
    pub fn true_j(&self, c: &ContrastSpec) -> Result<f64> {
        let weights = c.weights_on_levels(&self.levels)?;
        let gw = 1.0 / self.t.grid as f64;
        let mut j = 0.0;
        for u in 0..self.d_u() {
            for g in 0..self.t.grid {
                for (l, w) in weights.iter().enumerate() {
                    if *w != 0.0 {
                        j += self.t.p_u[u] * gw * w * self.t.k0v[l][g][u];
                    }
                }
            }
        }
        Ok(j)
    }

    /// All positive-mass atoms over (u, g, z, w0, w1).
    pub fn atoms(&self) -> Vec<FsAtom> {
        let gw = 1.0 / self.t.grid as f64;
        let mut out = Vec::new();
        for u in 0..self.d_u() {
            for g in 0..self.t.grid {
                for z in 0..self.d_z() {
                    let pz = self.t.p_u[u] * gw * self.t.p_z_given_u[u][z];
                    if pz <= 0.0 {
                        continue;
                    }
                    let a_level = self.a_level(z, u, g);
                    let y_mean = self.t.k0v[a_level][g][u];
                    for w0 in 0..self.t.d_w0 {
                        for w1 in 0..self.t.d_w1 {
                            let prob = pz * self.t.p_w_given_u[u][w0 * self.t.d_w1 + w1];
                            if prob > 0.0 {
                                out.push(FsAtom {
                                    u,
                                    g,
                                    z,
                                    w0,
                                    w1,
                                    a_level,
                                    prob,
                                    y_mean,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn check_dist(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(IccError::Spec(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(IccError::Spec(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// Draws with columns y, a, z, w0, w1 and latent u, eta, v_oracle, v43_oracle.
pub fn sample_monotone(fs: &FirstStagePopulation, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(IccError::Domain("sample size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, fs.y_noise_sd()).map_err(|e| IccError::Spec(format!("outcome noise: {e}")))?;
    let cum_u = cumulative(fs.p_u());
    let cum_z: Vec<Vec<f64>> = fs.t.p_z_given_u.iter().map(|p| cumulative(p)).collect();
    let cum_w: Vec<Vec<f64>> = fs.t.p_w_given_u.iter().map(|p| cumulative(p)).collect();
    let (mut y, mut a, mut eta, mut v, mut v43): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) =
        Default::default();
    let (mut us, mut zs, mut w0s, mut w1s): (Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>) = Default::default();
    for _ in 0..n {
        let u = draw_index(&mut rng, &cum_u);
        let g = rng.random_range(0..fs.grid());
        let z = draw_index(&mut rng, &cum_z[u]);
        let w = draw_index(&mut rng, &cum_w[u]);
        let level = fs.a_level(z, u, g);
        let eps = if fs.y_noise_sd() > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        y.push(fs.k0v(level, g, u) + eps);
        a.push(fs.levels()[level]);
        eta.push(fs.eta(g));
        v.push(fs.mid_cdf(level, z, u));
        v43.push(fs.v43(level, z));
        us.push(u);
        zs.push(z);
        w0s.push(w / fs.d_w1());
        w1s.push(w % fs.d_w1());
    }
    Dataset::new(
        vec![
            Column::continuous("y", VariableRole::Outcome, y),
            Column::continuous("a", VariableRole::Treatment, a),
            Column::categorical("z", VariableRole::Instrument, &zs, fs.d_z()),
            Column::categorical("w0", VariableRole::ProxyW0, &w0s, fs.d_w0()),
            Column::categorical("w1", VariableRole::ProxyW1, &w1s, fs.d_w1()),
            Column::categorical("u", VariableRole::LatentConfounder, &us, fs.d_u()),
            Column::continuous("eta", VariableRole::LatentDisturbance, eta),
            Column::continuous("v_oracle", VariableRole::LatentDisturbance, v),
            Column::continuous("v43_oracle", VariableRole::LatentDisturbance, v43),
        ],
        true,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::ate_contrast;

    fn fixture(seed: u64) -> FirstStagePopulation {
        FirstStagePopulation::generate(&FirstStageOptions::oracle_fixture(), seed).unwrap()
    }

    #[test]
    fn atoms_sum_to_one() {
        let fs = fixture(11);
        let s: f64 = fs.atoms().iter().map(|a| a.prob).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_v_is_grid_quantile() {
        let fs = fixture(11);
        for z in 0..fs.d_z() {
            for u in 0..fs.d_u() {
                for g in 0..fs.grid() {
                    let v = fs.mid_cdf(fs.a_level(z, u, g), z, u);
                    assert!((v - fs.eta(g)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn v43_increasing_in_eta_within_u() {
        let fs = fixture(12);
        for z in 0..fs.d_z() {
            for u in 0..fs.d_u() {
                let path: Vec<f64> = (0..fs.grid()).map(|g| fs.v43(fs.a_level(z, u, g), z)).collect();
                assert!(path.windows(2).all(|w| w[0] < w[1]), "z={z} u={u}: {path:?}");
            }
        }
    }

    #[test]
    fn single_u_v43_equals_v() {
        let opts = FirstStageOptions {
            d_u: 1,
            ..FirstStageOptions::oracle_fixture()
        };
        let fs = FirstStagePopulation::generate(&opts, 3).unwrap();
        let ds = sample_monotone(&fs, 300, 1).unwrap();
        assert_eq!(
            ds.column("v_oracle").unwrap().values,
            ds.column("v43_oracle").unwrap().values
        );
    }

    #[test]
    fn non_monotone_h_rejected() {
        let fs = fixture(11);
        let mut t: Tables = fs.into();
        t.h_form[0].swap(0, 1);
        assert!(matches!(FirstStagePopulation::build(t), Err(IccError::Spec(_))));
    }

    #[test]
    fn ate_support_reachable_everywhere() {
        let fs = fixture(13);
        let lv = fs.levels();
        let l0 = lv.iter().position(|&x| x == 0.0).unwrap();
        let l1 = lv.iter().position(|&x| x == 1.0).unwrap();
        for u in 0..fs.d_u() {
            for g in 0..fs.grid() {
                assert!(fs.propensity(l0, g, u) > 0.0 && fs.propensity(l1, g, u) > 0.0);
            }
        }
        assert!(fs.true_j(&ate_contrast(1.0, 0.0).unwrap()).unwrap().is_finite());
    }

    #[test]
    fn toml_roundtrip() {
        let fs = fixture(14);
        let s = toml::to_string(&fs).unwrap();
        let back: FirstStagePopulation = toml::from_str(&s).unwrap();
        assert_eq!(back.atoms(), fs.atoms());
    }
}
