//! IPW, regression and doubly robust estimators conditional on a binned
//! control, plus the bias identity that makes the DR form robust.
//!
//! cargo run --example tilde_estimators -- [population seed]

use icc::bridge_discrete::{control_quantity_from_tau, control_tables, solve_h_bridges, solve_q_bridges, SOLVE_TOL};
use icc::control_function::control_quantity;
use icc::data_model::ate_contrast;
use icc::estimators::{contrast_levels, ipw_bias_sides, tilde_phi_dr, tilde_phi_ipw, tilde_phi_reg, Cells};
use icc::oracle::{binned, randomized_table};
use icc::synth::{FirstStageOptions, FirstStagePopulation};

fn main() -> icc::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(11);
    let ate = ate_contrast(1.0, 0.0)?;
    let fs = FirstStagePopulation::generate(&FirstStageOptions::oracle_fixture(), seed)?;
    let truth = fs.true_j(&ate)?;
    let (c, _) = Cells::from_first_stage(&fs);

    let table = control_quantity_from_tau(&control_tables(&c)?, SOLVE_TOL)?;
    let c = binned(&c, &control_quantity(&c.a, &c.z, &table)?, 21)?;
    let levels = contrast_levels(&c, &ate)?;
    let h = solve_h_bridges(&c, &levels, SOLVE_TOL)?;
    let q = solve_q_bridges(&c, &levels, SOLVE_TOL)?;

    println!("truth       {truth:.10}");
    println!("tilde ipw   {:.10}", tilde_phi_ipw(&c, &q, &ate)?.j_hat);
    println!("tilde reg   {:.10}", tilde_phi_reg(&c, &h, &ate)?.j_hat);
    println!("tilde dr    {:.10}", tilde_phi_dr(&c, &h, &q, &ate)?.j_hat);

    // A wrong q biases IPW by exactly the amount the identity predicts.
    let bad_q = randomized_table(&q, 1);
    let (bias, predicted) = ipw_bias_sides(&c, &bad_q, &h, &ate, truth)?;
    println!("\nwrong q: IPW bias {bias:.6}, predicted {predicted:.6}");
    println!(
        "wrong q, right h: DR = {:.10}",
        tilde_phi_dr(&c, &h, &bad_q, &ate)?.j_hat
    );
    Ok(())
}
