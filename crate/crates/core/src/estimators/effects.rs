//! Observed-U estimators (phi) and bridge-based estimators (tilde phi).

use crate::bridge_discrete::BridgeTable;
use crate::data_model::ContrastSpec;
use crate::error::{IccError, Result};
use crate::estimators::moments::Cells;
use crate::estimators::EstimateReport;

/// Cell frequencies over (a, control bin, u) used by the observed-U estimators.
#[derive(Debug, Clone)]
pub struct OracleTables {
    n_a: usize,
    n_b: usize,
    d_u: usize,
    mass: Vec<f64>,
    ysum: Vec<f64>,
    /// Mass of each (bin, u) slice.
    slice: Vec<f64>,
}

impl OracleTables {
    pub fn from_cells(c: &Cells) -> Result<Self> {
        let (u, d_u) = c.u_codes()?;
        let (n_a, n_b) = (c.a_levels.len(), c.n_vbins);
        let mut t = OracleTables {
            n_a,
            n_b,
            d_u,
            mass: vec![0.0; n_a * n_b * d_u],
            ysum: vec![0.0; n_a * n_b * d_u],
            slice: vec![0.0; n_b * d_u],
        };
        for i in 0..c.len() {
            let k = t.idx(c.a[i], c.vbin[i], u[i]);
            t.mass[k] += c.weight[i];
            t.ysum[k] += c.weight[i] * c.y[i];
            t.slice[c.vbin[i] * d_u + u[i]] += c.weight[i];
        }
        Ok(t)
    }

    fn idx(&self, a: usize, b: usize, u: usize) -> usize {
        (a * self.n_b + b) * self.d_u + u
    }

    /// Generalised propensity f(a | v, u).
    pub fn f(&self, a: usize, b: usize, u: usize) -> f64 {
        let s = self.slice[b * self.d_u + u];
        if s > 0.0 {
            self.mass[self.idx(a, b, u)] / s
        } else {
            0.0
        }
    }

    /// k(a, v, u) = E[Y | a, v, u].
    pub fn k(&self, a: usize, b: usize, u: usize) -> f64 {
        let k = self.idx(a, b, u);
        self.ysum[k] / self.mass[k]
    }

    /// Every populated (v, u) slice must carry every contrast level.
    pub fn check_support(&self, pi: &[f64]) -> Result<()> {
        for (a, &p) in pi.iter().enumerate().take(self.n_a) {
            if p == 0.0 {
                continue;
            }
            for b in 0..self.n_b {
                for u in 0..self.d_u {
                    if self.slice[b * self.d_u + u] > 0.0 && self.mass[self.idx(a, b, u)] <= 0.0 {
                        return Err(IccError::CommonSupport(format!(
                            "f(a-level {a} | bin {b}, u {u}) = 0 on the contrast support"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn n_used(c: &Cells) -> usize {
    c.weight.iter().filter(|&&w| w > 0.0).count()
}

fn oracle_setup<'c>(c: &'c Cells, contrast: &ContrastSpec) -> Result<(OracleTables, Vec<f64>, &'c [usize])> {
    let t = OracleTables::from_cells(c)?;
    let pi = contrast.weights_on_levels(&c.a_levels)?;
    t.check_support(&pi)?;
    Ok((t, pi, c.u_codes()?.0))
}

/// E[Y pi(A) / f(A | V, U)].
pub fn phi_ipw(c: &Cells, contrast: &ContrastSpec) -> Result<EstimateReport> {
    let (t, pi, u) = oracle_setup(c, contrast)?;
    let j = (0..c.len())
        .filter(|&i| pi[c.a[i]] != 0.0)
        .map(|i| c.weight[i] * c.y[i] * pi[c.a[i]] / t.f(c.a[i], c.vbin[i], u[i]))
        .sum();
    Ok(EstimateReport::new("phi_ipw", j, n_used(c)))
}

/// IPW with a supplied propensity `f(level, bin, u)`.
pub fn phi_ipw_with(
    c: &Cells,
    contrast: &ContrastSpec,
    f: impl Fn(usize, usize, usize) -> f64,
) -> Result<EstimateReport> {
    let pi = contrast.weights_on_levels(&c.a_levels)?;
    let (u, _) = c.u_codes()?;
    let mut j = 0.0;
    for i in (0..c.len()).filter(|&i| pi[c.a[i]] != 0.0) {
        let p = f(c.a[i], c.vbin[i], u[i]);
        if p <= 0.0 {
            return Err(IccError::CommonSupport(format!(
                "supplied propensity is {p} at row {i}"
            )));
        }
        j += c.weight[i] * c.y[i] * pi[c.a[i]] / p;
    }
    Ok(EstimateReport::new("phi_ipw", j, n_used(c)))
}

fn integrated_k(t: &OracleTables, pi: &[f64], b: usize, u: usize) -> f64 {
    pi.iter()
        .enumerate()
        .filter(|(_, &p)| p != 0.0)
        .map(|(a, p)| p * t.k(a, b, u))
        .sum()
}

/// E[sum_a pi(a) k(a, V, U)].
pub fn phi_reg(c: &Cells, contrast: &ContrastSpec) -> Result<EstimateReport> {
    let (t, pi, u) = oracle_setup(c, contrast)?;
    let j = (0..c.len())
        .map(|i| c.weight[i] * integrated_k(&t, &pi, c.vbin[i], u[i]))
        .sum();
    Ok(EstimateReport::new("phi_reg", j, n_used(c)))
}

/// E[(Y - k(A, V, U)) pi(A) / f(A | V, U) + sum_a pi(a) k(a, V, U)].
pub fn phi_dr(c: &Cells, contrast: &ContrastSpec) -> Result<EstimateReport> {
    let (t, pi, u) = oracle_setup(c, contrast)?;
    let j = (0..c.len())
        .map(|i| {
            let (a, b) = (c.a[i], c.vbin[i]);
            let w = if pi[a] != 0.0 {
                (c.y[i] - t.k(a, b, u[i])) * pi[a] / t.f(a, b, u[i])
            } else {
                0.0
            };
            c.weight[i] * (w + integrated_k(&t, &pi, b, u[i]))
        })
        .sum();
    Ok(EstimateReport::new("phi_dr", j, n_used(c)))
}

/// (T h)(v, w) = sum_a pi(a) h(a, v, w).
pub(crate) fn t_h(h: &BridgeTable, pi: &[f64], b: usize, w: usize) -> Result<f64> {
    let mut s = 0.0;
    for (a, &p) in pi.iter().enumerate() {
        if p != 0.0 {
            s += p * h.value(a, b, w)?;
        }
    }
    Ok(s)
}

fn require_valid(t: &BridgeTable, what: &str) -> Result<()> {
    if t.all_valid() {
        Ok(())
    } else {
        Err(IccError::Identification(format!(
            "{what} bridge invalid on some cell (max relative residual {:.3e})",
            t.max_relative_residual()
        )))
    }
}

/// E[Y pi(A) q(A, V, Z)] without validity checks.
pub fn tilde_ipw_moment(c: &Cells, q: &BridgeTable, pi: &[f64]) -> Result<f64> {
    let mut j = 0.0;
    for i in (0..c.len()).filter(|&i| pi[c.a[i]] != 0.0) {
        j += c.weight[i] * c.y[i] * pi[c.a[i]] * q.value(c.a[i], c.vbin[i], c.z[i])?;
    }
    Ok(j)
}

/// E[(T h)(V, W)] without validity checks.
pub fn tilde_reg_moment(c: &Cells, h: &BridgeTable, pi: &[f64]) -> Result<f64> {
    let mut j = 0.0;
    for i in 0..c.len() {
        j += c.weight[i] * t_h(h, pi, c.vbin[i], c.w[i])?;
    }
    Ok(j)
}

/// E[(Y - h(A, V, W)) pi(A) q(A, V, Z) + (T h)(V, W)] without validity checks.
pub fn tilde_dr_moment(c: &Cells, h: &BridgeTable, q: &BridgeTable, pi: &[f64]) -> Result<f64> {
    let mut j = 0.0;
    for i in 0..c.len() {
        let (a, b) = (c.a[i], c.vbin[i]);
        let mut m = t_h(h, pi, b, c.w[i])?;
        if pi[a] != 0.0 {
            m += (c.y[i] - h.value(a, b, c.w[i])?) * pi[a] * q.value(a, b, c.z[i])?;
        }
        j += c.weight[i] * m;
    }
    Ok(j)
}

pub fn tilde_phi_ipw(c: &Cells, q: &BridgeTable, contrast: &ContrastSpec) -> Result<EstimateReport> {
    require_valid(q, "action")?;
    let pi = contrast.weights_on_levels(&c.a_levels)?;
    let j = tilde_ipw_moment(c, q, &pi)?;
    Ok(EstimateReport::new("tilde_ipw", j, n_used(c)).diag("q_max_rel_residual", q.max_relative_residual()))
}

pub fn tilde_phi_reg(c: &Cells, h: &BridgeTable, contrast: &ContrastSpec) -> Result<EstimateReport> {
    require_valid(h, "outcome")?;
    let pi = contrast.weights_on_levels(&c.a_levels)?;
    let j = tilde_reg_moment(c, h, &pi)?;
    Ok(EstimateReport::new("tilde_reg", j, n_used(c)).diag("h_max_rel_residual", h.max_relative_residual()))
}

/// Doubly robust: requires at least one of the two bridges to be valid.
pub fn tilde_phi_dr(c: &Cells, h: &BridgeTable, q: &BridgeTable, contrast: &ContrastSpec) -> Result<EstimateReport> {
    if !h.all_valid() && !q.all_valid() {
        return Err(IccError::Identification(
            "neither the outcome nor the action bridge is valid".into(),
        ));
    }
    let pi = contrast.weights_on_levels(&c.a_levels)?;
    let j = tilde_dr_moment(c, h, q, &pi)?;
    Ok(EstimateReport::new("tilde_dr", j, n_used(c))
        .diag("h_max_rel_residual", h.max_relative_residual())
        .diag("q_max_rel_residual", q.max_relative_residual()))
}

/// Levels with nonzero contrast weight.
pub fn contrast_levels(c: &Cells, contrast: &ContrastSpec) -> Result<Vec<usize>> {
    let pi = contrast.weights_on_levels(&c.a_levels)?;
    Ok((0..pi.len()).filter(|&a| pi[a] != 0.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge_discrete::{solve_h_bridges, solve_q_bridges, SOLVE_TOL};
    use crate::control_function::{bin_control_weighted, population_cdf_control, ControlKind};
    use crate::data_model::ate_contrast;
    use crate::synth::{random_population, true_j, DiscreteDims, FirstStageOptions, FirstStagePopulation};

    fn oracle_binned(fs: &FirstStagePopulation) -> (Cells, f64) {
        let (c, _) = Cells::from_first_stage(fs);
        let (u, d_u) = c.u_codes().unwrap();
        let groups: Vec<usize> = c.z.iter().zip(u).map(|(z, u)| z * d_u + u).collect();
        let a: Vec<f64> = c.a.iter().map(|&l| c.a_levels[l]).collect();
        let v = population_cdf_control(&c.weight, &a, &groups, ControlKind::OracleVu).unwrap();
        let v = bin_control_weighted(&v, &c.weight, 21).unwrap();
        let c = c.with_bins(v.bin_index.unwrap()).unwrap();
        let j = fs.true_j(&ate_contrast(1.0, 0.0).unwrap()).unwrap();
        (c, j)
    }

    #[test]
    fn oracle_estimators_agree_on_population() {
        let fs = FirstStagePopulation::generate(&FirstStageOptions::oracle_fixture(), 11).unwrap();
        let (c, j) = oracle_binned(&fs);
        let ate = ate_contrast(1.0, 0.0).unwrap();
        for r in [phi_ipw(&c, &ate), phi_reg(&c, &ate), phi_dr(&c, &ate)] {
            assert!((r.unwrap().j_hat - j).abs() < 1e-10);
        }
    }

    #[test]
    fn tilde_estimators_agree_on_population() {
        let fs = FirstStagePopulation::generate(&FirstStageOptions::oracle_fixture(), 11).unwrap();
        let (c, j) = oracle_binned(&fs);
        let ate = ate_contrast(1.0, 0.0).unwrap();
        let levels = contrast_levels(&c, &ate).unwrap();
        let h = solve_h_bridges(&c, &levels, SOLVE_TOL).unwrap();
        let q = solve_q_bridges(&c, &levels, SOLVE_TOL).unwrap();
        assert!(h.all_valid() && q.all_valid());
        let ipw = tilde_phi_ipw(&c, &q, &ate).unwrap().j_hat;
        let reg = tilde_phi_reg(&c, &h, &ate).unwrap().j_hat;
        let dr = tilde_phi_dr(&c, &h, &q, &ate).unwrap().j_hat;
        for x in [ipw, reg, dr] {
            assert!((x - j).abs() < 1e-8, "{x} vs {j}");
        }
    }

    #[test]
    fn single_bin_reg_is_outcome_route() {
        let pop = random_population(DiscreteDims::new(2, 4, 2, 3), 7, 1e-4).unwrap();
        let c = Cells::from_discrete_population(&pop);
        let ate = ate_contrast(1.0, 0.0).unwrap();
        let h = solve_h_bridges(&c, &[0, 1], SOLVE_TOL).unwrap();
        let reg = tilde_phi_reg(&c, &h, &ate).unwrap().j_hat;
        assert!((reg - true_j(&pop, &ate).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn constant_outcome_gives_zero_ipw() {
        let pop = random_population(DiscreteDims::new(2, 4, 2, 3), 3, 1e-4).unwrap();
        let mut c = Cells::from_discrete_population(&pop);
        c.y.iter_mut().for_each(|y| *y = 4.2);
        let r = phi_ipw(&c, &ate_contrast(1.0, 0.0).unwrap()).unwrap();
        assert!(r.j_hat.abs() < 1e-12);
    }

    #[test]
    fn known_uniform_propensity_is_difference_of_means() {
        let y = vec![1.0, 2.0, 4.0, 7.0, 3.0, 5.0];
        let a = vec![0, 1, 0, 1, 1, 0];
        let c = Cells {
            weight: vec![1.0 / 6.0; 6],
            y: y.clone(),
            a: a.clone(),
            a_levels: vec![0.0, 1.0],
            z: vec![0; 6],
            d_z: 1,
            w: vec![0; 6],
            d_w: 1,
            w0: None,
            w1: None,
            u: Some((vec![0; 6], 1)),
            vbin: vec![0; 6],
            n_vbins: 1,
        };
        let r = phi_ipw_with(&c, &ate_contrast(1.0, 0.0).unwrap(), |_, _, _| 0.5).unwrap();
        let m1 = (2.0 + 7.0 + 3.0) / 3.0;
        let m0 = (1.0 + 4.0 + 5.0) / 3.0;
        assert!((r.j_hat - (m1 - m0)).abs() < 1e-12);
    }

    #[test]
    fn missing_arm_is_common_support_error() {
        let c = Cells {
            weight: vec![0.25; 4],
            y: vec![1.0; 4],
            a: vec![0, 0, 1, 1],
            a_levels: vec![0.0, 1.0],
            z: vec![0; 4],
            d_z: 1,
            w: vec![0; 4],
            d_w: 1,
            w0: None,
            w1: None,
            u: Some((vec![0, 0, 1, 1], 2)),
            vbin: vec![0; 4],
            n_vbins: 1,
        };
        assert!(matches!(
            phi_reg(&c, &ate_contrast(1.0, 0.0).unwrap()),
            Err(IccError::CommonSupport(_))
        ));
    }
}
