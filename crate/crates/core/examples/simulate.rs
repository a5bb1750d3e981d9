//! Draw a sample from a random discrete population and write it as CSV.
//!
//! cargo run --example simulate -- [n] [out.csv]

use std::path::PathBuf;

use icc::data_model::ate_contrast;
use icc::synth::{random_population, sample_discrete, true_j, DiscreteDims, Var};

fn main() -> icc::Result<()> {
    let mut args = std::env::args().skip(1);
    let n = args.next().and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("icc_simulated.csv"));

    // Two latent confounder levels, five instrument levels, binary A, three proxy levels.
    let pop = random_population(DiscreteDims::new(2, 5, 2, 3), 7, 1e-4)?;
    let ds = sample_discrete(&pop, n, 1)?;
    ds.write_csv(&out)?;

    let names: Vec<&str> = ds.columns().iter().map(|c| c.name.as_str()).collect();
    println!("wrote {} rows with columns {:?} to {}", ds.n(), names, out.display());
    println!("p(u) = {:?}", pop.p_u());
    println!("P(W | U) =\n{}", pop.cond_matrix(&[Var::W], &[Var::U]).matrix);
    println!("true ATE = {:.6}", true_j(&pop, &ate_contrast(1.0, 0.0)?)?);
    Ok(())
}
