//! Linear ICC on one confounded sample: the three algebraic forms of the
//! estimator, with OLS and 2SLS for contrast.
//!
//! cargo run --release --example linear_icc -- [n] [seed]

use icc::estimators::{estimate, EstimateOptions, EstimatorId};
use icc::linear_icc::{fit_icc, fit_icc_control_form, fit_icc_two_stage, IccOptions};
use icc::synth::{sample_linear, LinearDGPSpec};

fn main() -> icc::Result<()> {
    let mut args = std::env::args().skip(1);
    let n = args.next().and_then(|s| s.parse().ok()).unwrap_or(5000);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(77);
    let spec = LinearDGPSpec::confounded_reference();

    let s = spec.sample_matrices(n, seed)?;
    let y = s.y.column(0).into_owned();
    let o = IccOptions::default();
    let fit = fit_icc(&y, &s.a, &s.z, &s.w, o)?;
    let se = fit.cov.as_ref().map_or(f64::NAN, |v| v[(0, 0)].sqrt());
    println!("true beta = {:?}", spec.beta);
    println!(
        "icc             beta {:.6} (se {se:.4}), rank {}, sv(P_Z W) {:?}",
        fit.beta_hat[0], fit.rank_used, fit.singular_values
    );
    println!(
        "control form    beta {:.6}",
        fit_icc_control_form(&y, &s.a, &s.z, &s.w, o)?.beta_hat[0]
    );
    println!(
        "two stage       beta {:.6}",
        fit_icc_two_stage(&y, &s.a, &s.z, &s.w, o)?.beta_hat[0]
    );

    let ds = sample_linear(&spec, n, seed)?;
    for id in [EstimatorId::Ols, EstimatorId::TwoSls] {
        let r = estimate(&ds, id, &EstimateOptions::default())?;
        println!("{:<15} beta {:.6}", id.to_string(), r.j_hat);
    }
    Ok(())
}
