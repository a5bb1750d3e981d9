use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use icc::bridge_discrete::{
    effect_from_outcome_bridge, outcome_tables, perturb_nullspace, solve_h_bridges, solve_outcome_bridge,
    solve_q_bridges, SOLVE_TOL,
};
use icc::control_function::{bin_control_weighted, ControlColumn, ControlKind};
use icc::data_model::{ate_contrast, ContrastKind, ContrastSpec};
use icc::estimators::{ipw_bias_sides, reg_bias_sides, Cells};
use icc::linear_icc::{fit_icc, fit_icc_control_form, fit_icc_two_stage, IccOptions};
use icc::oracle::randomized_table;
use icc::synth::{random_population, true_j, DiscreteDims, FirstStageOptions, FirstStagePopulation, Var};

fn identified_dims(d_u: usize, extra_w: usize, extra_z: usize) -> DiscreteDims {
    DiscreteDims::new(d_u, 2 * d_u + 1 + extra_z, 2, d_u + 1 + extra_w)
}

fn contrast(w0: f64, w1: f64) -> ContrastSpec {
    ContrastSpec::new(ContrastKind::DiscreteWeights, vec![0.0, 1.0], vec![w0, w1]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn true_j_is_linear_in_the_contrast(seed in 0u64..10_000, a in -3.0..3.0f64, b in -3.0..3.0f64, c in -3.0..3.0f64, d in -3.0..3.0f64) {
        let pop = random_population(identified_dims(2, 0, 0), seed, 1e-4).unwrap();
        let (c1, c2) = (contrast(a, b), contrast(c, d));
        let sum = c1.add(&c2).unwrap();
        let lhs = true_j(&pop, &sum).unwrap();
        let rhs = true_j(&pop, &c1).unwrap() + true_j(&pop, &c2).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conditional_columns_sum_to_one(seed in 0u64..10_000, d_u in 1usize..4) {
        let pop = random_population(identified_dims(d_u, 1, 0), seed, 1e-4).unwrap();
        for (t, g) in [(vec![Var::W], vec![Var::U]), (vec![Var::A, Var::W], vec![Var::Z]), (vec![Var::Z], vec![Var::U])] {
            let m = pop.cond_matrix(&t, &g).matrix;
            for col in m.column_iter() {
                prop_assert!((col.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outcome_bridge_recovers_truth(seed in 0u64..10_000, d_u in 1usize..4, extra_w in 0usize..2, extra_z in 0usize..2) {
        let pop = random_population(identified_dims(d_u, extra_w, extra_z), seed, 1e-4).unwrap();
        let c = Cells::from_discrete_population(&pop);
        let t = outcome_tables(&c, 0.0);
        let sol = solve_outcome_bridge(&t.p_aw_given_z, &t.ey_given_z, SOLVE_TOL).unwrap();
        prop_assert!(sol.is_valid());
        let ate = ate_contrast(1.0, 0.0).unwrap();
        let j = effect_from_outcome_bridge(&sol, &t.p_w, &t.a_levels, &ate).unwrap();
        prop_assert!((j - true_j(&pop, &ate).unwrap()).abs() < 1e-10);
        if sol.nullspace_dim > 0 {
            let moved = perturb_nullspace(&sol, 2.5, seed).unwrap();
            let jm = effect_from_outcome_bridge(&moved, &t.p_w, &t.a_levels, &ate).unwrap();
            prop_assert!((jm - j).abs() < 1e-8);
        }
    }

    #[test]
    fn bias_identities_hold_for_any_plug_in(seed in 0u64..10_000, d_u in 1usize..4, draw in 0u64..1000) {
        let pop = random_population(identified_dims(d_u, 0, 0), seed, 1e-4).unwrap();
        let c = Cells::from_discrete_population(&pop);
        let ate = ate_contrast(1.0, 0.0).unwrap();
        let levels = vec![0, 1];
        let h = solve_h_bridges(&c, &levels, SOLVE_TOL).unwrap();
        let q = solve_q_bridges(&c, &levels, SOLVE_TOL).unwrap();
        let j = true_j(&pop, &ate).unwrap();
        let (l, r) = ipw_bias_sides(&c, &randomized_table(&q, draw), &h, &ate, j).unwrap();
        prop_assert!((l - r).abs() < 1e-10);
        let (l, r) = reg_bias_sides(&c, &randomized_table(&h, draw), &q, &ate, j).unwrap();
        prop_assert!((l - r).abs() < 1e-10);
    }

    #[test]
    fn icc_forms_agree(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 120;
        let d_w = rng.random_range(1..=3);
        let r = rng.random_range(1..=d_w);
        let d_z = 1 + d_w + rng.random_range(0..=1);
        let g = |rng: &mut ChaCha8Rng, r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = g(&mut rng, n, d_z);
        let a = &z * g(&mut rng, d_z, 1) + g(&mut rng, n, 1);
        let w = &z * g(&mut rng, d_z, d_w) + g(&mut rng, n, d_w);
        let y: DVector<f64> = (&a + &w * g(&mut rng, d_w, 1) + g(&mut rng, n, 1)).column(0).into_owned();
        let o = IccOptions::declared(r);
        let b0 = fit_icc(&y, &a, &z, &w, o).unwrap().beta_hat;
        let b1 = fit_icc_control_form(&y, &a, &z, &w, o).unwrap().beta_hat;
        let b2 = fit_icc_two_stage(&y, &a, &z, &w, o).unwrap().beta_hat;
        // Forms differ only in rounding, which grows with the squared condition
        // number of the projected regressors.
        let pz = &z * (z.transpose() * &z).try_inverse().unwrap() * z.transpose();
        let xh = &pz * DMatrix::from_columns(&a.column_iter().chain(w.column_iter()).collect::<Vec<_>>());
        let sv = xh.singular_values();
        let tol = (1e-14 * (sv.max() / sv.min()).powi(2)).max(1e-10);
        prop_assert!((&b0 - &b1).amax() < tol);
        prop_assert!((&b0 - &b2).amax() < tol);
    }

    #[test]
    fn binning_never_splits_ties(values in prop::collection::vec(0u8..12, 5..80), n_bins in 2usize..8) {
        let v: Vec<f64> = values.iter().map(|&k| k as f64 / 11.0).collect();
        let w = vec![1.0 / v.len() as f64; v.len()];
        let col = ControlColumn::new(v.clone(), ControlKind::EmpiricalNoU).unwrap();
        let b = bin_control_weighted(&col, &w, n_bins).unwrap();
        let codes = b.bin_codes();
        prop_assert!(b.n_bins() <= n_bins);
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] == v[j] {
                    prop_assert_eq!(codes[i], codes[j]);
                }
                if v[i] < v[j] {
                    prop_assert!(codes[i] <= codes[j]);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn control_quantity_increases_along_eta(seed in 0u64..1000) {
        let fs = FirstStagePopulation::generate(&FirstStageOptions::oracle_fixture(), seed).unwrap();
        for z in 0..fs.d_z() {
            for u in 0..fs.d_u() {
                let v: Vec<f64> = (0..fs.grid()).map(|g| fs.v43(fs.a_level(z, u, g), z)).collect();
                prop_assert!(v.windows(2).all(|p| p[0] < p[1]), "z {} u {}: {:?}", z, u, v);
            }
        }
    }
}
