//! Monte Carlo comparison of OLS, 2SLS and ICC on the confounded linear model.
//!
//! cargo run --release --example monte_carlo -- [replications] [n]

use std::time::Instant;

use icc::estimators::{run_mc, DgpSpec, EstimateOptions, EstimatorId, McConfig};
use icc::synth::LinearDGPSpec;

fn main() -> icc::Result<()> {
    let mut args = std::env::args().skip(1);
    let replications = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);
    let n = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let cfg = McConfig {
        dgp: DgpSpec::Linear(LinearDGPSpec::confounded_reference()),
        estimators: vec![EstimatorId::Ols, EstimatorId::TwoSls, EstimatorId::Icc],
        replications,
        n,
        seed: 77,
        options: EstimateOptions::default(),
    };
    let start = Instant::now();
    let table = run_mc(&cfg)?;
    print!("{}", table.to_markdown());
    println!("\nelapsed: {:.2?}", start.elapsed());
    Ok(())
}
