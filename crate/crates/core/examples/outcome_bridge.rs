//! Exact outcome bridge on a discrete population, then the same estimator on a
//! finite sample.
//!
//! cargo run --release --example outcome_bridge -- [n]

use icc::bridge_discrete::{
    effect_from_outcome_bridge, outcome_tables, perturb_nullspace, solve_outcome_bridge, SOLVE_TOL,
};
use icc::data_model::ate_contrast;
use icc::estimators::{estimate, Cells, EstimateOptions, EstimatorId};
use icc::synth::{random_population, sample_discrete, true_j, DiscreteDims};

fn main() -> icc::Result<()> {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50_000);
    let ate = ate_contrast(1.0, 0.0)?;
    // More proxy levels than confounder levels, so the bridge is not unique.
    let pop = random_population(DiscreteDims::new(2, 5, 2, 4), 7, 1e-4)?;
    let truth = true_j(&pop, &ate)?;

    let t = outcome_tables(&Cells::from_discrete_population(&pop), 0.0);
    let sol = solve_outcome_bridge(&t.p_aw_given_z, &t.ey_given_z, SOLVE_TOL)?;
    let j = effect_from_outcome_bridge(&sol, &t.p_w, &t.a_levels, &ate)?;
    println!(
        "population: rank {}, null space dim {}, relative residual {:.1e}",
        sol.rank,
        sol.nullspace_dim,
        sol.residual_norm / sol.rhs_norm
    );
    println!("  J = {j:.12}  truth = {truth:.12}");

    // Any solution identifies the same effect.
    for seed in 0..3 {
        let moved = perturb_nullspace(&sol, 5.0, seed)?;
        let jm = effect_from_outcome_bridge(&moved, &t.p_w, &t.a_levels, &ate)?;
        println!("  moved 5 units along the null space: J = {jm:.12}");
    }

    let ds = sample_discrete(&pop, n, 3)?;
    let r = estimate(&ds, EstimatorId::OutcomeBridge, &EstimateOptions::default())?;
    println!("sample n = {n}: J hat = {:.4}", r.j_hat);
    for (k, v) in &r.diagnostics {
        if v.fract() == 0.0 {
            println!("  {k} = {v}");
        } else {
            println!("  {k} = {v:.3e}");
        }
    }
    Ok(())
}
