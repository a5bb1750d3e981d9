//! Population identity checks, for an identified population and for one where
//! the proxies are too coarse to stand in for the confounder.
//!
//! cargo run --example oracle_check

use icc::data_model::ate_contrast;
use icc::estimators::DgpSpec;
use icc::oracle::{run_oracle_suite, OracleConfig};
use icc::synth::DiscreteDims;

fn main() -> icc::Result<()> {
    for (label, dims) in [
        ("identified", DiscreteDims::new(2, 5, 2, 3)),
        ("d_W < d_U", DiscreteDims::new(3, 7, 2, 2)),
    ] {
        let cfg = OracleConfig {
            population: DgpSpec::Discrete {
                dims,
                population_seed: 7,
                support_floor: 1e-4,
                y_noise_sd: 0.0,
            },
            contrast: ate_contrast(1.0, 0.0)?,
            n_bins: 21,
            draws: 10,
            seed: 0,
        };
        let report = run_oracle_suite(&cfg)?;
        println!(
            "## {label}: {}\n",
            if report.passed() {
                "all checks pass"
            } else {
                "some checks fail"
            }
        );
        println!("{}", report.to_markdown());
    }
    Ok(())
}
