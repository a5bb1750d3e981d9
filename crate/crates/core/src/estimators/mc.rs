//! Monte Carlo harness.
//!
//! Replication r draws its data with seed `seed + r`. Replications run in
//! parallel; results are collected per replication and aggregated in index
//! order, so the table does not depend on scheduling.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{ContrastSpec, Dataset};
use crate::error::{IccError, Result};
use crate::estimators::pipeline::{estimate, EstimateOptions, EstimatorId};
use crate::synth::{
    random_population, sample_discrete, sample_linear, sample_monotone, true_j, DiscreteDims, DiscretePopulation,
    FirstStageOptions, FirstStagePopulation, LinearDGPSpec,
};

fn default_floor() -> f64 {
    1e-4
}

/// Data-generating process description, as written in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpSpec {
    Linear(LinearDGPSpec),
    Discrete {
        dims: DiscreteDims,
        population_seed: u64,
        #[serde(default = "default_floor")]
        support_floor: f64,
        #[serde(default)]
        y_noise_sd: f64,
    },
    FirstStage {
        #[serde(default)]
        options: FirstStageOptions,
        population_seed: u64,
    },
}

/// A resolved data-generating process.
#[derive(Debug, Clone)]
pub enum Dgp {
    Linear(LinearDGPSpec),
    Discrete(DiscretePopulation),
    FirstStage(FirstStagePopulation),
}

impl DgpSpec {
    pub fn build(&self) -> Result<Dgp> {
        Ok(match self {
            DgpSpec::Linear(spec) => {
                spec.validate()?;
                Dgp::Linear(spec.clone())
            }
            DgpSpec::Discrete {
                dims,
                population_seed,
                support_floor,
                y_noise_sd,
            } => Dgp::Discrete(random_population(*dims, *population_seed, *support_floor)?.with_noise(*y_noise_sd)),
            DgpSpec::FirstStage {
                options,
                population_seed,
            } => Dgp::FirstStage(FirstStagePopulation::generate(options, *population_seed)?),
        })
    }
}

impl Dgp {
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        match self {
            Dgp::Linear(s) => sample_linear(s, n, seed),
            Dgp::Discrete(p) => sample_discrete(p, n, seed),
            Dgp::FirstStage(f) => sample_monotone(f, n, seed),
        }
    }

    /// Ground-truth J; for the linear model J = beta * sum_a pi(a) a.
    pub fn truth(&self, c: &ContrastSpec) -> Result<f64> {
        match self {
            Dgp::Linear(s) => {
                if s.beta.len() != 1 {
                    return Err(IccError::Spec("linear truth needs a scalar treatment".into()));
                }
                Ok(s.beta[0] * c.effective().iter().map(|(a, w)| a * w).sum::<f64>())
            }
            Dgp::Discrete(p) => true_j(p, c),
            Dgp::FirstStage(f) => f.true_j(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub dgp: DgpSpec,
    pub estimators: Vec<EstimatorId>,
    pub replications: usize,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub options: EstimateOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub estimator: EstimatorId,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    /// Share of replications whose 95% interval covers the truth; absent
    /// when the estimator reports no standard error.
    pub coverage: Option<f64>,
    /// Successful replications.
    pub r: usize,
    pub failures: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedLedger {
    pub base_seed: u64,
    pub first: u64,
    pub last: u64,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McTable {
    pub truth: f64,
    pub rows: Vec<McRow>,
    pub seeds: SeedLedger,
    /// First error message per estimator with failures.
    pub failure_notes: Vec<(EstimatorId, String)>,
}

type Draw = Vec<std::result::Result<(f64, Option<f64>), String>>;

pub fn run_mc(cfg: &McConfig) -> Result<McTable> {
    if cfg.replications == 0 {
        return Err(IccError::Domain("replications must be at least 1".into()));
    }
    if cfg.n < 10 {
        return Err(IccError::Domain("n must be at least 10".into()));
    }
    if cfg.estimators.is_empty() {
        return Err(IccError::Domain("no estimators selected".into()));
    }
    let dgp = cfg.dgp.build()?;
    let truth = dgp.truth(&cfg.options.contrast)?;
    let draws: Vec<Draw> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.seed.wrapping_add(r as u64);
            match dgp.sample(cfg.n, seed) {
                Ok(ds) => cfg
                    .estimators
                    .iter()
                    .map(|&id| {
                        estimate(&ds, id, &cfg.options)
                            .map(|rep| (rep.j_hat, rep.se))
                            .map_err(|e| e.to_string())
                    })
                    .collect(),
                Err(e) => vec![Err(e.to_string()); cfg.estimators.len()],
            }
        })
        .collect();
    let mut rows = Vec::with_capacity(cfg.estimators.len());
    let mut failure_notes = Vec::new();
    for (k, &id) in cfg.estimators.iter().enumerate() {
        let mut ok = Vec::new();
        let mut first_err = None;
        for d in &draws {
            match &d[k] {
                Ok(v) => ok.push(*v),
                Err(e) => {
                    first_err.get_or_insert_with(|| e.clone());
                }
            }
        }
        if let Some(e) = first_err {
            failure_notes.push((id, e));
        }
        rows.push(summarize(id, &ok, truth, cfg.replications, cfg.n));
    }
    Ok(McTable {
        truth,
        rows,
        seeds: SeedLedger {
            base_seed: cfg.seed,
            first: cfg.seed,
            last: cfg.seed.wrapping_add(cfg.replications as u64 - 1),
            replications: cfg.replications,
        },
        failure_notes,
    })
}

/// sd divides by the number of draws, so rmse^2 = bias^2 + sd^2.
fn summarize(id: EstimatorId, draws: &[(f64, Option<f64>)], truth: f64, total: usize, n: usize) -> McRow {
    let r = draws.len();
    let rf = r as f64;
    let (mean, sd, rmse) = if r == 0 {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let mean = draws.iter().map(|d| d.0).sum::<f64>() / rf;
        let var = draws.iter().map(|d| (d.0 - mean).powi(2)).sum::<f64>() / rf;
        let mse = draws.iter().map(|d| (d.0 - truth).powi(2)).sum::<f64>() / rf;
        (mean, var.sqrt(), mse.sqrt())
    };
    let with_se: Vec<(f64, f64)> = draws.iter().filter_map(|d| d.1.map(|s| (d.0, s))).collect();
    let coverage = (!with_se.is_empty()).then(|| {
        let hit = with_se
            .iter()
            .filter(|(j, s)| (j - truth).abs() <= 1.959964 * s)
            .count();
        hit as f64 / with_se.len() as f64
    });
    McRow {
        estimator: id,
        mean,
        bias: mean - truth,
        sd,
        rmse,
        coverage,
        r,
        failures: total - r,
        n,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl McTable {
    pub fn row(&self, id: EstimatorId) -> Option<&McRow> {
        self.rows.iter().find(|r| r.estimator == id)
    }

    /// CSV with full-precision numbers and the seed ledger as trailing comment lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("estimator,mean,bias,sd,rmse,coverage,R,failures,n,truth\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.estimator,
                r.mean,
                r.bias,
                r.sd,
                r.rmse,
                opt(r.coverage),
                r.r,
                r.failures,
                r.n,
                self.truth
            );
        }
        let l = &self.seeds;
        let _ = writeln!(
            s,
            "# seeds: base={} replications={} first={} last={}",
            l.base_seed, l.replications, l.first, l.last
        );
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| estimator | mean | bias | sd | rmse | coverage | R | failures | n |\n");
        s.push_str("|---|---:|---:|---:|---:|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let cov = r.coverage.map_or_else(|| "-".to_string(), |c| format!("{c:.3}"));
            let _ = writeln!(
                s,
                "| {} | {:.5} | {:.5} | {:.5} | {:.5} | {} | {} | {} | {} |",
                r.estimator, r.mean, r.bias, r.sd, r.rmse, cov, r.r, r.failures, r.n
            );
        }
        let l = &self.seeds;
        let _ = writeln!(s, "\nTruth: {}\n", self.truth);
        let _ = writeln!(
            s,
            "Seeds: replication r uses seed {} + r, for r in 0..{} (seeds {} to {}).",
            l.base_seed, l.replications, l.first, l.last
        );
        for (id, e) in &self.failure_notes {
            let _ = writeln!(s, "\nFirst failure of {id}: {e}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_cfg(r: usize, n: usize) -> McConfig {
        McConfig {
            dgp: DgpSpec::Linear(LinearDGPSpec::confounded_reference()),
            estimators: vec![EstimatorId::Ols, EstimatorId::TwoSls, EstimatorId::Icc],
            replications: r,
            n,
            seed: 77,
            options: EstimateOptions::default(),
        }
    }

    #[test]
    fn single_replication_has_zero_sd() {
        let t = run_mc(&linear_cfg(1, 200)).unwrap();
        for r in &t.rows {
            assert_eq!(r.sd, 0.0);
            assert!((r.bias.abs() - r.rmse).abs() < 1e-15);
        }
    }

    #[test]
    fn moments_are_consistent() {
        let t = run_mc(&linear_cfg(20, 300)).unwrap();
        for r in &t.rows {
            assert!((r.rmse.powi(2) - r.bias.powi(2) - r.sd.powi(2)).abs() < 1e-10);
        }
        assert_eq!(t.seeds.last, 96);
    }

    #[test]
    fn reruns_are_identical() {
        let a = run_mc(&linear_cfg(16, 200)).unwrap();
        let b = run_mc(&linear_cfg(16, 200)).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_markdown(), b.to_markdown());
    }

    #[test]
    fn failures_are_counted() {
        let mut cfg = linear_cfg(3, 50);
        cfg.estimators = vec![EstimatorId::OutcomeBridge];
        let t = run_mc(&cfg).unwrap();
        assert_eq!(t.rows[0].failures, 3);
        assert_eq!(t.failure_notes.len(), 1);
    }

    #[test]
    fn rejects_tiny_runs() {
        assert!(run_mc(&linear_cfg(0, 100)).is_err());
        assert!(run_mc(&linear_cfg(1, 5)).is_err());
    }

    #[test]
    fn config_parses_from_toml() {
        let text = r#"
estimators = ["ols", "2sls", "icc"]
replications = 2
n = 100
seed = 3

[dgp.discrete]
dims = { d_u = 2, d_z = 5, d_a = 2, d_w = 3 }
population_seed = 7
"#;
        let cfg: McConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.estimators[1], EstimatorId::TwoSls);
        assert!(matches!(cfg.dgp, DgpSpec::Discrete { population_seed: 7, .. }));
    }
}
