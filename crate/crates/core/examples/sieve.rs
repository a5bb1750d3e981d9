//! Sieve bridge: an indicator basis reproduces the exact discrete bridge, and
//! a polynomial basis estimates the linear model's effect.
//!
//! cargo run --release --example sieve -- [n]

use icc::bridge_discrete::{outcome_tables, solve_outcome_bridge, SOLVE_TOL};
use icc::estimators::{estimate, Cells, EstimateOptions, EstimatorId};
use icc::sieve_bridge::{build_features, fit_sieve_weighted, BasisSpec};
use icc::synth::{random_population, sample_linear, DiscreteDims, LinearDGPSpec};

fn main() -> icc::Result<()> {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);

    // Population weights make the weighted sieve fit an exact moment solve.
    let pop = random_population(DiscreteDims::new(2, 5, 2, 3), 7, 1e-4)?;
    let c = Cells::from_discrete_population(&pop);
    let a: Vec<f64> = c.a.iter().map(|&l| c.a_levels[l]).collect();
    let w: Vec<f64> = c.w.iter().map(|&v| v as f64).collect();
    let z: Vec<f64> = c.z.iter().map(|&v| v as f64).collect();
    let (b, map) = build_features(&["A", "W"], &[&a, &w], &BasisSpec::indicator(None))?;
    let (cz, _) = build_features(&["Z"], &[&z], &BasisSpec::indicator(None))?;
    let fit = fit_sieve_weighted(&c.y, &b, &cz, &c.weight, 0.0)?;
    let t = outcome_tables(&c, 0.0);
    let exact = solve_outcome_bridge(&t.p_aw_given_z, &t.ey_given_z, SOLVE_TOL)?;
    println!("indicator sieve vs exact bridge");
    for (k, name) in map.names().iter().enumerate() {
        println!("  {name:<10} {:+.8} {:+.8}", fit.theta[k], exact.coeffs[k]);
    }

    let ds = sample_linear(&LinearDGPSpec::confounded_reference(), n, 5)?;
    let r = estimate(&ds, EstimatorId::Sieve, &EstimateOptions::default())?;
    println!("\nlinear model, n = {n}: sieve effect {:.4} (truth 1)", r.j_hat);
    Ok(())
}
