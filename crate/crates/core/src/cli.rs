//! Config-driven command line: simulate, estimate, mc, oracle-check, checklist.
//!
//! Every command except `checklist` reads one TOML file. `--seed` overrides the
//! file's `seed` key. Exit codes: 0 success, 2 config error, 3 identification
//! error (or a failed oracle invariant), 4 internal error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data_model::{ate_contrast, load_csv_with, ColumnSpec, ContrastSpec, Dataset, KindSpec, RoleMap};
use crate::error::{IccError, Result};
use crate::estimators::{
    estimate, run_mc, ControlSource, DgpSpec, EstimateOptions, EstimateReport, EstimatorId, McConfig, McTable,
};
use crate::oracle::{run_oracle_suite, OracleConfig, OracleReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IDENTIFICATION: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "icc",
    version,
    about = "Instrumented common confounding estimators and oracles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a dataset and write it with a ground-truth sidecar.
    Simulate(RunArgs),
    /// Run estimators on a CSV or a freshly simulated dataset.
    Estimate(RunArgs),
    /// Monte Carlo experiment over replications.
    Mc(RunArgs),
    /// Population invariant suite for a discrete or first-stage population.
    OracleCheck(RunArgs),
    /// Print the four-step model-construction checklist.
    Checklist {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub json: bool,
}

/// Parse arguments, run, print errors to stderr and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &IccError) -> i32 {
    match e {
        _ if e.is_identification_failure() => EXIT_IDENTIFICATION,
        IccError::CellSize(_) => EXIT_IDENTIFICATION,
        IccError::Config { .. }
        | IccError::Spec(_)
        | IccError::Schema(_)
        | IccError::Parse { .. }
        | IccError::InvalidContrast(_)
        | IccError::Domain(_)
        | IccError::Binning(_) => EXIT_CONFIG,
        _ => EXIT_INTERNAL,
    }
}

fn dispatch(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Simulate(a) => {
            let cfg: SimulateConfig = read_config(&a.config, a.seed)?;
            let truth = cmd_simulate(&cfg, &a.out)?;
            if a.json {
                emit(&format!("{}\n", to_json(&truth)?));
            } else {
                emit(&format!(
                    "wrote {} rows to {}\ntrue J = {}\n",
                    cfg.n,
                    a.out.join("dataset.csv").display(),
                    truth.true_j
                ));
            }
            Ok(EXIT_OK)
        }
        Command::Estimate(a) => {
            let mut cfg: EstimateConfig = read_config(&a.config, a.seed)?;
            cfg.resolve_paths(a.config.parent().unwrap_or(Path::new(".")));
            let out = cmd_estimate(&cfg, &a.out)?;
            if a.json {
                emit(&format!("{}\n", to_json(&out.reports)?));
            } else {
                emit(&estimate_markdown(&out));
            }
            for (id, e) in &out.errors {
                eprintln!("error: {id}: {e}");
            }
            Ok(out.errors.first().map_or(EXIT_OK, |(_, e)| exit_code(e)))
        }
        Command::Mc(a) => {
            let cfg: McConfig = read_config(&a.config, a.seed)?;
            let table = cmd_mc(&cfg, &a.out)?;
            if a.json {
                emit(&format!("{}\n", to_json(&table)?));
            } else {
                emit(&table.to_markdown());
            }
            Ok(EXIT_OK)
        }
        Command::OracleCheck(a) => {
            let cfg: OracleConfig = read_config(&a.config, a.seed)?;
            let report = cmd_oracle_check(&cfg, &a.out)?;
            if a.json {
                emit(&format!("{}\n", to_json(&report)?));
            } else {
                emit(&report.to_markdown());
            }
            Ok(if report.passed() { EXIT_OK } else { EXIT_IDENTIFICATION })
        }
        Command::Checklist { json } => {
            if *json {
                emit(&format!("{}\n", to_json(&CHECKLIST)?));
            } else {
                emit(&checklist_text());
            }
            Ok(EXIT_OK)
        }
    }
}

// A closed pipe (e.g. `| head`) is not an error worth a panic.
fn emit(s: &str) {
    let _ = std::io::stdout().lock().write_all(s.as_bytes());
}

fn to_json<T: Serialize + ?Sized>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| IccError::Io(std::io::Error::other(e.to_string())))
}

/// Read a TOML config, apply the seed override, and deserialize with the
/// offending key path in any error.
pub fn read_config<T: DeserializeOwned>(path: &Path, seed: Option<u64>) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| IccError::config(path.display().to_string(), format!("cannot read config: {e}")))?;
    parse_config(&text, seed)
}

pub fn parse_config<T: DeserializeOwned>(text: &str, seed: Option<u64>) -> Result<T> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| IccError::config("<file>", e.message().to_string()))?;
    if let Some(s) = seed {
        let s = i64::try_from(s).map_err(|_| IccError::config("seed", "seed does not fit in a TOML integer"))?;
        table.insert("seed".into(), toml::Value::Integer(s));
    }
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        IccError::config(
            if path == "." { "<root>".to_string() } else { path },
            e.inner().to_string(),
        )
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn default_contrast() -> ContrastSpec {
    ate_contrast(1.0, 0.0).expect("valid contrast")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub dgp: DgpSpec,
    pub n: usize,
    pub seed: u64,
    #[serde(default = "default_contrast")]
    pub contrast: ContrastSpec,
}

/// Ground-truth sidecar written next to a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub seed: u64,
    pub n: usize,
    pub true_j: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    pub contrast: ContrastSpec,
    pub roles: RoleMap,
    pub dgp: DgpSpec,
}

fn role_map(ds: &Dataset) -> RoleMap {
    ds.columns()
        .iter()
        .map(|c| {
            let kind = if c.is_categorical() {
                KindSpec::Categorical
            } else {
                KindSpec::Continuous
            };
            (c.name.clone(), ColumnSpec { role: c.role, kind })
        })
        .collect()
}

pub fn cmd_simulate(cfg: &SimulateConfig, out: &Path) -> Result<TruthFile> {
    let dgp = cfg.dgp.build()?;
    let ds = dgp.sample(cfg.n, cfg.seed)?;
    let truth = TruthFile {
        seed: cfg.seed,
        n: cfg.n,
        true_j: dgp.truth(&cfg.contrast)?,
        beta: match &cfg.dgp {
            DgpSpec::Linear(spec) => Some(spec.beta.clone()),
            _ => None,
        },
        contrast: cfg.contrast.clone(),
        roles: role_map(&ds),
        dgp: cfg.dgp.clone(),
    };
    std::fs::create_dir_all(out)?;
    ds.write_csv(&out.join("dataset.csv"))?;
    let text = toml::to_string(&truth).map_err(|e| IccError::Io(std::io::Error::other(e.to_string())))?;
    write(&out.join("truth.toml"), &text)?;
    Ok(truth)
}

/// Named estimator bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// OLS, 2SLS and ICC.
    Linear,
    /// Pooled outcome bridge and single-bin bridge estimators.
    Discrete,
    /// Bridge estimators conditioned on the control quantity.
    FirstStage,
    Sieve,
}

impl Method {
    pub fn estimators(self) -> Vec<EstimatorId> {
        use EstimatorId::*;
        match self {
            Method::Linear => vec![Ols, TwoSls, Icc],
            Method::Discrete => vec![OutcomeBridge, TildeReg, TildeIpw, TildeDr],
            Method::FirstStage => vec![TildeIpw, TildeReg, TildeDr],
            Method::Sieve => vec![Sieve],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedData {
    pub dgp: DgpSpec,
    pub n: usize,
}

/// Exactly one of `csv` and `simulate`. A CSV takes its roles from `roles`
/// or from the `sidecar` truth file written by `simulate`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub csv: Option<PathBuf>,
    pub roles: Option<RoleMap>,
    pub sidecar: Option<PathBuf>,
    /// Admit latent-role columns from a CSV with inline roles.
    #[serde(default)]
    pub simulated: bool,
    pub simulate: Option<SimulatedData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub data: DataSection,
    pub method: Option<Method>,
    pub estimators: Option<Vec<EstimatorId>>,
    #[serde(default)]
    pub options: EstimateOptions,
    pub seed: Option<u64>,
}

impl EstimateConfig {
    /// Interpret relative data paths against the config file's directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.csv, &mut self.data.sidecar].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn estimator_list(&self) -> Result<Vec<EstimatorId>> {
        match (&self.estimators, self.method) {
            (Some(e), _) if !e.is_empty() => Ok(e.clone()),
            (_, Some(m)) => Ok(m.estimators()),
            _ => Err(IccError::config(
                "method",
                "set `method` or a non-empty `estimators` list",
            )),
        }
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let d = &self.data;
        match (&d.csv, &d.simulate) {
            (Some(_), Some(_)) => Err(IccError::config("data", "give exactly one of `csv` and `simulate`")),
            (None, None) => Err(IccError::config("data", "no data source: set `csv` or `simulate`")),
            (None, Some(sim)) => {
                let seed = self
                    .seed
                    .ok_or_else(|| IccError::config("seed", "a simulated data source needs a seed"))?;
                sim.dgp.build()?.sample(sim.n, seed)
            }
            (Some(csv), None) => {
                let (roles, simulated) = match (&d.roles, &d.sidecar) {
                    (Some(r), None) => (r.clone(), d.simulated),
                    (None, Some(s)) => {
                        let truth: TruthFile = read_config(s, None)?;
                        (truth.roles, true)
                    }
                    _ => {
                        return Err(IccError::config(
                            "data",
                            "give exactly one of `roles` and `sidecar` with `csv`",
                        ))
                    }
                };
                load_csv_with(csv, &roles, simulated)
            }
        }
    }
}

#[derive(Debug)]
pub struct EstimateOutput {
    pub reports: Vec<EstimateReport>,
    pub errors: Vec<(EstimatorId, IccError)>,
}

/// Run every selected estimator, write estimate.csv and estimate.md, and keep
/// failures alongside successes.
pub fn cmd_estimate(cfg: &EstimateConfig, out: &Path) -> Result<EstimateOutput> {
    let ids = cfg.estimator_list()?;
    let ds = cfg.load_data()?;
    let mut opts = cfg.options.clone();
    if cfg.method == Some(Method::FirstStage) && opts.control == ControlSource::None {
        opts.control = ControlSource::ControlQuantity;
    }
    let mut output = EstimateOutput {
        reports: Vec::new(),
        errors: Vec::new(),
    };
    for id in ids {
        match estimate(&ds, id, &opts) {
            Ok(r) => output.reports.push(r),
            Err(e) => output.errors.push((id, e)),
        }
    }
    write(&out.join("estimate.csv"), &estimate_csv(&output))?;
    write(&out.join("estimate.md"), &estimate_markdown(&output))?;
    Ok(output)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn estimate_csv(o: &EstimateOutput) -> String {
    let mut s = String::from("estimator,quantity,value\n");
    for r in &o.reports {
        let _ = writeln!(s, "{},j_hat,{}", r.estimator, r.j_hat);
        let _ = writeln!(
            s,
            "{},se,{}",
            r.estimator,
            r.se.map_or_else(String::new, |x| x.to_string())
        );
        let _ = writeln!(s, "{},n_used,{}", r.estimator, r.n_used);
        for (k, v) in &r.diagnostics {
            let _ = writeln!(s, "{},{},{}", r.estimator, csv_field(k), v);
        }
    }
    for (id, e) in &o.errors {
        let _ = writeln!(s, "{id},error,{}", csv_field(&e.to_string()));
    }
    s
}

// Counts print as integers, everything else in short scientific form.
fn diag_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.4e}")
    }
}

pub fn estimate_markdown(o: &EstimateOutput) -> String {
    let mut s = String::from("| estimator | J | se | 95% CI | n |\n|---|---:|---:|---|---:|\n");
    for r in &o.reports {
        let se = r.se.map_or_else(|| "-".into(), |x| format!("{x:.5}"));
        let ci = r
            .ci95()
            .map_or_else(|| "-".into(), |(l, h)| format!("[{l:.5}, {h:.5}]"));
        let _ = writeln!(s, "| {} | {:.6} | {se} | {ci} | {} |", r.estimator, r.j_hat, r.n_used);
    }
    for r in &o.reports {
        if r.diagnostics.is_empty() {
            continue;
        }
        let _ = writeln!(s, "\nDiagnostics for {}:\n", r.estimator);
        for (k, v) in &r.diagnostics {
            if v.is_nan() {
                let _ = writeln!(s, "- {k}");
            } else {
                let _ = writeln!(s, "- {k}: {}", diag_value(*v));
            }
        }
    }
    for (id, e) in &o.errors {
        let _ = writeln!(s, "\n{id} failed: {e}");
    }
    s
}

pub fn cmd_mc(cfg: &McConfig, out: &Path) -> Result<McTable> {
    let table = run_mc(cfg)?;
    write(&out.join("mc.csv"), &table.to_csv())?;
    write(&out.join("mc.md"), &table.to_markdown())?;
    Ok(table)
}

pub fn cmd_oracle_check(cfg: &OracleConfig, out: &Path) -> Result<OracleReport> {
    let report = run_oracle_suite(cfg)?;
    write(&out.join("oracle_check.csv"), &report.to_csv())?;
    write(&out.join("oracle_check.md"), &report.to_markdown())?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ChecklistStep {
    pub step: usize,
    pub name: &'static str,
    pub condition: &'static str,
    pub action: &'static str,
}

pub const CHECKLIST: [ChecklistStep; 4] = [
    ChecklistStep {
        step: 1,
        name: "Z exogeneity",
        condition: "Y(a, z) = Y(a) is independent of Z given U, for all a",
        action: "Define the common confounders U so that the instruments are excluded and unconfounded given U.",
    },
    ChecklistStep {
        step: 2,
        name: "W exogeneity",
        condition: "W(a, z) = W is independent of (A, Z) given U",
        action: "Add to U any unobserved variable needed for the proxies W to be unaffected by treatment and instruments given U.",
    },
    ChecklistStep {
        step: 3,
        name: "W relevance",
        condition: "E[g(A, U) | A, W] = 0 only when g(A, U) = 0, for any g in L2(A, U)",
        action: "Check that W is complete for U given A (discrete case: rank of P(W | U) is d_U).",
    },
    ChecklistStep {
        step: 4,
        name: "Z relevance",
        condition: "E[g(A, U) | Z] = 0 only when g(A, U) = 0, for any g in L2(A, U)",
        action: "Check that Z is complete for (A, U) (discrete case: rank of P(A, U | Z) is d_A * d_U).",
    },
];

pub fn checklist_text() -> String {
    let mut s = String::from("Instrumented common confounding: model-construction checklist\n\n");
    for st in &CHECKLIST {
        let _ = writeln!(
            s,
            "{}. {}\n   Condition: {}\n   {}\n",
            st.step, st.name, st.condition, st.action
        );
    }
    s.push_str("Richer Z and W make the completeness conditions in steps 3 and 4 easier to justify.\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_seed_names_the_key() {
        let text = "n = 10\n[dgp.discrete]\ndims = { d_u = 1, d_z = 3, d_a = 2, d_w = 2 }\npopulation_seed = 1\n";
        match parse_config::<SimulateConfig>(text, None) {
            Err(IccError::Config { message, .. }) => assert!(message.contains("seed"), "{message}"),
            other => panic!("{other:?}"),
        }
        let cfg: SimulateConfig = parse_config(text, Some(4)).unwrap();
        assert_eq!(cfg.seed, 4);
    }

    #[test]
    fn nested_error_path() {
        let text = "seed = 1\nn = 10\n[dgp.discrete]\ndims = { d_u = \"two\", d_z = 3, d_a = 2, d_w = 2 }\npopulation_seed = 1\n";
        match parse_config::<SimulateConfig>(text, None) {
            Err(IccError::Config { path, .. }) => assert!(path.contains("d_u"), "{path}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_contrast_rejected_on_load() {
        let text = "n = 10\nseed = 1\ncontrast = { kind = \"discrete_weights\", support = [1.0, 0.0], weights = [1.0, -1.0] }\n[dgp.discrete]\ndims = { d_u = 1, d_z = 3, d_a = 2, d_w = 2 }\npopulation_seed = 1\n";
        match parse_config::<SimulateConfig>(text, None) {
            Err(IccError::Config { path, message }) => {
                assert_eq!(path, "contrast");
                assert!(message.contains("increasing"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_config_is_config_error() {
        let e = parse_config::<OracleConfig>("", None).unwrap_err();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&IccError::Identification("x".into())), EXIT_IDENTIFICATION);
        assert_eq!(exit_code(&IccError::config("a", "b")), EXIT_CONFIG);
        assert_eq!(exit_code(&IccError::Dimension("x".into())), EXIT_INTERNAL);
    }

    #[test]
    fn checklist_has_four_steps() {
        let t = checklist_text();
        for (i, name) in ["Z exogeneity", "W exogeneity", "W relevance", "Z relevance"]
            .iter()
            .enumerate()
        {
            assert!(t.contains(&format!("{}. {name}", i + 1)));
        }
        let j: serde_json::Value = serde_json::from_str(&to_json(&CHECKLIST).unwrap()).unwrap();
        assert_eq!(j.as_array().unwrap().len(), 4);
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["icc", "checklist", "--bogus"]), 2);
    }

    #[test]
    fn data_source_must_be_unique() {
        let cfg = EstimateConfig {
            data: DataSection::default(),
            method: Some(Method::Linear),
            estimators: None,
            options: EstimateOptions::default(),
            seed: None,
        };
        assert!(matches!(cfg.load_data(), Err(IccError::Config { .. })));
    }
}
