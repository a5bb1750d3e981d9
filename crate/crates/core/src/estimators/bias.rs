//! Both sides of the plug-in bias identities, evaluated in population mode.

use std::collections::BTreeMap;

use crate::bridge_discrete::BridgeTable;
use crate::data_model::ContrastSpec;
use crate::error::Result;
use crate::estimators::effects::{tilde_ipw_moment, tilde_reg_moment};
use crate::estimators::moments::Cells;

/// IPW bias for an arbitrary action bridge `q`, given a valid outcome bridge `h0`:
///
/// lhs = E[Y pi(A) q] - J
/// rhs = sum over (a, v, w) of p(a, v, w) h0(a, v, w) pi(a) (E[q | a, v, w] - 1 / f(a | v, w))
pub fn ipw_bias_sides(
    c: &Cells,
    q: &BridgeTable,
    h0: &BridgeTable,
    contrast: &ContrastSpec,
    j: f64,
) -> Result<(f64, f64)> {
    let pi = contrast.weights_on_levels(&c.a_levels)?;
    let lhs = tilde_ipw_moment(c, q, &pi)? - j;
    // (a, v, w) -> (mass, sum of weight * q); (v, w) -> mass
    let mut cell: BTreeMap<(usize, usize, usize), (f64, f64)> = BTreeMap::new();
    let mut slice: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..c.len() {
        let (a, b, w) = (c.a[i], c.vbin[i], c.w[i]);
        *slice.entry((b, w)).or_default() += c.weight[i];
        if pi[a] != 0.0 {
            let e = cell.entry((a, b, w)).or_default();
            e.0 += c.weight[i];
            e.1 += c.weight[i] * q.value(a, b, c.z[i])?;
        }
    }
    let mut rhs = 0.0;
    for (&(a, b, w), &(mass, qsum)) in &cell {
        let f = mass / slice[&(b, w)];
        rhs += mass * h0.value(a, b, w)? * pi[a] * (qsum / mass - 1.0 / f);
    }
    Ok((lhs, rhs))
}

/// REG bias for an arbitrary outcome bridge `h`, given a valid action bridge `q0`:
///
/// lhs = E[(T h)(V, W)] - J
/// rhs = E[pi(A) q0(A, V, Z) E[h(A, V, W) - Y | A, V, Z]]
pub fn reg_bias_sides(
    c: &Cells,
    h: &BridgeTable,
    q0: &BridgeTable,
    contrast: &ContrastSpec,
    j: f64,
) -> Result<(f64, f64)> {
    let pi = contrast.weights_on_levels(&c.a_levels)?;
    let lhs = tilde_reg_moment(c, h, &pi)? - j;
    // (a, v, z) -> (mass, sum of weight * (h - Y))
    let mut cell: BTreeMap<(usize, usize, usize), (f64, f64)> = BTreeMap::new();
    for i in 0..c.len() {
        let (a, b) = (c.a[i], c.vbin[i]);
        if pi[a] != 0.0 {
            let e = cell.entry((a, b, c.z[i])).or_default();
            e.0 += c.weight[i];
            e.1 += c.weight[i] * (h.value(a, b, c.w[i])? - c.y[i]);
        }
    }
    let mut rhs = 0.0;
    for (&(a, b, z), &(mass, dsum)) in &cell {
        rhs += mass * pi[a] * q0.value(a, b, z)? * (dsum / mass);
    }
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge_discrete::{perturb_nullspace, solve_h_bridges, solve_q_bridges, SOLVE_TOL};
    use crate::data_model::ate_contrast;
    use crate::synth::{random_population, true_j, DiscreteDims};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomized(t: &BridgeTable, seed: u64) -> BridgeTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = t.clone();
        for s in out.cells.values_mut() {
            let noisy = s.coeffs.map(|x| x + rng.random_range(-1.0..1.0));
            *s = s.with_coeffs(noisy);
        }
        out
    }

    #[test]
    fn identities_hold_for_invalid_plugins() {
        let pop = random_population(DiscreteDims::new(2, 5, 2, 3), 4, 1e-4).unwrap();
        let c = Cells::from_discrete_population(&pop);
        let ate = ate_contrast(1.0, 0.0).unwrap();
        let j = true_j(&pop, &ate).unwrap();
        let h0 = solve_h_bridges(&c, &[0, 1], SOLVE_TOL).unwrap();
        let q0 = solve_q_bridges(&c, &[0, 1], SOLVE_TOL).unwrap();
        assert!(h0.all_valid() && q0.all_valid());
        for seed in 0..5 {
            let (l, r) = ipw_bias_sides(&c, &randomized(&q0, seed), &h0, &ate, j).unwrap();
            assert!((l - r).abs() < 1e-10 && l.abs() > 1e-6);
            let (l, r) = reg_bias_sides(&c, &randomized(&h0, seed), &q0, &ate, j).unwrap();
            assert!((l - r).abs() < 1e-10 && l.abs() > 1e-6);
        }
        let (l, r) = ipw_bias_sides(&c, &q0, &h0, &ate, j).unwrap();
        assert!(l.abs() < 1e-10 && r.abs() < 1e-10);
    }

    #[test]
    fn nullspace_moves_leave_no_bias() {
        let pop = random_population(DiscreteDims::new(2, 5, 2, 3), 4, 1e-4).unwrap();
        let c = Cells::from_discrete_population(&pop);
        let ate = ate_contrast(1.0, 0.0).unwrap();
        let j = true_j(&pop, &ate).unwrap();
        let mut h = solve_h_bridges(&c, &[0, 1], SOLVE_TOL).unwrap();
        let q0 = solve_q_bridges(&c, &[0, 1], SOLVE_TOL).unwrap();
        for (k, s) in h.cells.values_mut().enumerate() {
            *s = perturb_nullspace(s, 1.0, k as u64).unwrap();
        }
        let (l, r) = reg_bias_sides(&c, &h, &q0, &ate, j).unwrap();
        assert!(l.abs() < 1e-8 && r.abs() < 1e-8);
    }
}
