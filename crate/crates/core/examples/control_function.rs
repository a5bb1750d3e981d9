//! Control quantity V(a, z) recovered from observables through the control
//! bridge, compared with its latent-variable definition.
//!
//! cargo run --example control_function -- [population seed]

use icc::bridge_discrete::{control_quantity_from_tau, control_tables, SOLVE_TOL};
use icc::control_function::{bin_control, control_quantity};
use icc::estimators::Cells;
use icc::synth::{FirstStageOptions, FirstStagePopulation};

fn main() -> icc::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(11);
    let fs = FirstStagePopulation::generate(&FirstStageOptions::oracle_fixture(), seed)?;
    let (c, _) = Cells::from_first_stage(&fs);

    let table = control_quantity_from_tau(&control_tables(&c)?, SOLVE_TOL)?;
    println!(
        "V(a, z) from the control bridge ({} entries clipped to [0, 1])",
        table.n_clipped
    );
    let mut worst = 0.0_f64;
    // Each instrument reaches only some treatment levels; the rest are NaN.
    for (level, row) in table.values.iter().enumerate() {
        let mut seen = Vec::new();
        for (z, &v) in row.iter().enumerate().filter(|(_, v)| !v.is_nan()) {
            worst = worst.max((v - fs.v43(level, z)).abs());
            seen.push(v);
        }
        if let (Some(lo), Some(hi)) = (
            seen.iter().copied().reduce(f64::min),
            seen.iter().copied().reduce(f64::max),
        ) {
            println!(
                "  a level {level:>2}: {:>3} instruments, V in [{lo:.4}, {hi:.4}]",
                seen.len()
            );
        }
    }
    println!("max |V - V_latent| = {worst:.2e}");

    let v = control_quantity(&c.a, &c.z, &table)?;
    let b = bin_control(&v, 5)?;
    let mut counts = vec![0usize; b.n_bins()];
    for k in b.bin_codes() {
        counts[k] += 1;
    }
    println!("cells per bin over {} (a, z, w, u) cells: {counts:?}", c.len());
    Ok(())
}
