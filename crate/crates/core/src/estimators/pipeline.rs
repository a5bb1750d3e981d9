//! Dataset-level dispatch from an estimator id to a fitted [`EstimateReport`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bridge_discrete::{
    control_quantity_from_tau, control_tables, effect_from_outcome_bridge, outcome_tables, sample_tol, solve_h_bridges,
    solve_outcome_bridge, solve_q_bridges, BridgeTable,
};
use crate::control_function::{
    bin_control, check_common_support, control_quantity, empirical_cdf_control, oracle_control, ControlColumn,
};
use crate::data_model::{ate_contrast, ContrastSpec, Dataset, VariableRole};
use crate::error::{IccError, Result};
use crate::estimators::effects::{
    contrast_levels, phi_dr, phi_ipw, phi_reg, tilde_phi_dr, tilde_phi_ipw, tilde_phi_reg,
};
use crate::estimators::moments::Cells;
use crate::estimators::EstimateReport;
use crate::linear_icc::{fit_2sls, fit_icc, fit_icc_control_form, fit_ols, IccOptions};
use crate::sieve_bridge::{build_features, effect_from_sieve, fit_sieve_bridge, BasisSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorId {
    Ols,
    #[serde(rename = "2sls")]
    TwoSls,
    Icc,
    IccControlForm,
    OutcomeBridge,
    TildeIpw,
    TildeReg,
    TildeDr,
    PhiIpw,
    PhiReg,
    PhiDr,
    Sieve,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 12] = [
        EstimatorId::Ols,
        EstimatorId::TwoSls,
        EstimatorId::Icc,
        EstimatorId::IccControlForm,
        EstimatorId::OutcomeBridge,
        EstimatorId::TildeIpw,
        EstimatorId::TildeReg,
        EstimatorId::TildeDr,
        EstimatorId::PhiIpw,
        EstimatorId::PhiReg,
        EstimatorId::PhiDr,
        EstimatorId::Sieve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorId::Ols => "ols",
            EstimatorId::TwoSls => "2sls",
            EstimatorId::Icc => "icc",
            EstimatorId::IccControlForm => "icc_control_form",
            EstimatorId::OutcomeBridge => "outcome_bridge",
            EstimatorId::TildeIpw => "tilde_ipw",
            EstimatorId::TildeReg => "tilde_reg",
            EstimatorId::TildeDr => "tilde_dr",
            EstimatorId::PhiIpw => "phi_ipw",
            EstimatorId::PhiReg => "phi_reg",
            EstimatorId::PhiDr => "phi_dr",
            EstimatorId::Sieve => "sieve",
        }
    }

    pub fn is_linear(self) -> bool {
        matches!(
            self,
            EstimatorId::Ols | EstimatorId::TwoSls | EstimatorId::Icc | EstimatorId::IccControlForm
        )
    }
}

impl std::fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EstimatorId {
    type Err = IccError;
    fn from_str(s: &str) -> Result<Self> {
        EstimatorId::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| IccError::Domain(format!("unknown estimator '{s}'")))
    }
}

/// Source of the control variable V for the bridge and phi estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSource {
    /// Single bin: no control function.
    #[default]
    None,
    /// Mid-rank of A within instrument cells.
    Empirical,
    /// Mid-rank of A within (instrument, latent U) cells.
    Oracle,
    /// V(a, z) from the control bridge tau.
    ControlQuantity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateOptions {
    pub contrast: ContrastSpec,
    pub control: ControlSource,
    pub n_bins: usize,
    /// Laplace smoothing for the pooled outcome-bridge tables.
    pub alpha: f64,
    /// Relative residual tolerance for bridge validity; sample-scaled when absent.
    pub tol: Option<f64>,
    pub icc: IccOptions,
    pub basis_h: BasisSpec,
    pub basis_z: BasisSpec,
    /// Overlap share below which a (level, bin) cell is flagged.
    pub min_overlap: f64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            contrast: ate_contrast(1.0, 0.0).expect("valid contrast"),
            control: ControlSource::None,
            n_bins: 5,
            alpha: 0.0,
            tol: None,
            icc: IccOptions::default(),
            basis_h: BasisSpec::polynomial(1, 1),
            basis_z: BasisSpec::polynomial(2, 2),
            min_overlap: 0.0,
        }
    }
}

pub fn estimate(ds: &Dataset, id: EstimatorId, opts: &EstimateOptions) -> Result<EstimateReport> {
    if id.is_linear() {
        return estimate_linear(ds, id, opts);
    }
    if id == EstimatorId::Sieve {
        return estimate_sieve(ds, opts);
    }
    let cells = Cells::from_dataset(ds)?;
    if id == EstimatorId::OutcomeBridge {
        return estimate_outcome_bridge(&cells, opts);
    }
    let (cells, mut diags) = attach_control(&cells, opts)?;
    let mut report = match id {
        EstimatorId::PhiIpw => phi_ipw(&cells, &opts.contrast)?,
        EstimatorId::PhiReg => phi_reg(&cells, &opts.contrast)?,
        EstimatorId::PhiDr => phi_dr(&cells, &opts.contrast)?,
        _ => {
            let levels = contrast_levels(&cells, &opts.contrast)?;
            let needs_h = matches!(id, EstimatorId::TildeReg | EstimatorId::TildeDr);
            let needs_q = matches!(id, EstimatorId::TildeIpw | EstimatorId::TildeDr);
            let h = if needs_h {
                let tol = opts
                    .tol
                    .unwrap_or_else(|| sample_tol(min_cell_rows(&cells, &levels, false)));
                Some(solve_h_bridges(&cells, &levels, tol)?)
            } else {
                None
            };
            let q = if needs_q {
                let tol = opts
                    .tol
                    .unwrap_or_else(|| sample_tol(min_cell_rows(&cells, &levels, true)));
                Some(solve_q_bridges(&cells, &levels, tol)?)
            } else {
                None
            };
            if let Some(h) = &h {
                diags.extend(bridge_diags("h", h));
            }
            if let Some(q) = &q {
                diags.extend(bridge_diags("q", q));
            }
            match (h, q) {
                (Some(h), Some(q)) => tilde_phi_dr(&cells, &h, &q, &opts.contrast)?,
                (Some(h), None) => tilde_phi_reg(&cells, &h, &opts.contrast)?,
                (None, Some(q)) => tilde_phi_ipw(&cells, &q, &opts.contrast)?,
                (None, None) => unreachable!("every bridge estimator needs a bridge"),
            }
        }
    };
    report.diagnostics.extend(diags);
    Ok(report)
}

/// Smallest row count over the populated (a, bin) cells (`by_slice` counts the
/// whole bin instead, as the q system conditions on the bin).
fn min_cell_rows(c: &Cells, levels: &[usize], by_slice: bool) -> usize {
    let mut counts = vec![0usize; c.a_levels.len() * c.n_vbins];
    let mut bins = vec![0usize; c.n_vbins];
    for i in 0..c.len() {
        counts[c.a[i] * c.n_vbins + c.vbin[i]] += 1;
        bins[c.vbin[i]] += 1;
    }
    let mut m = usize::MAX;
    for &a in levels {
        for b in 0..c.n_vbins {
            let k = if by_slice { bins[b] } else { counts[a * c.n_vbins + b] };
            if k > 0 {
                m = m.min(k);
            }
        }
    }
    if m == usize::MAX {
        c.len()
    } else {
        m
    }
}

fn bridge_diags(prefix: &str, t: &BridgeTable) -> Vec<(String, f64)> {
    let mut out = vec![(format!("{prefix}_cells"), t.cells.len() as f64)];
    let max_null = t.cells.values().map(|s| s.nullspace_dim).max().unwrap_or(0);
    let min_rank = t.cells.values().map(|s| s.rank).min().unwrap_or(0);
    out.push((format!("{prefix}_min_rank"), min_rank as f64));
    out.push((format!("{prefix}_max_nullspace_dim"), max_null as f64));
    out
}

fn treatment_values(c: &Cells) -> Vec<f64> {
    c.a.iter().map(|&a| c.a_levels[a]).collect()
}

/// Compute the control column selected in `opts`, bin it and attach the bins.
fn attach_control(c: &Cells, opts: &EstimateOptions) -> Result<(Cells, Vec<(String, f64)>)> {
    let a = treatment_values(c);
    let mut diags = Vec::new();
    let v: ControlColumn = match opts.control {
        ControlSource::None => return Ok((c.clone(), diags)),
        ControlSource::Empirical => empirical_cdf_control(&a, &c.z)?,
        ControlSource::Oracle => {
            let (u, _) = c.u_codes()?;
            oracle_control(&a, &c.z, u)?
        }
        ControlSource::ControlQuantity => {
            let t = control_tables(c)?;
            let tol = opts.tol.unwrap_or_else(|| {
                let mut per_z = vec![0usize; c.d_z];
                for &z in &c.z {
                    per_z[z] += 1;
                }
                sample_tol(per_z.into_iter().filter(|&k| k > 0).min().unwrap_or(c.len()))
            });
            let table = control_quantity_from_tau(&t, tol)?;
            diags.push(("tau_max_rel_residual".into(), table.max_tau_residual));
            diags.push(("tau_n_clipped".into(), table.n_clipped as f64));
            diags.push(("tau_max_clip".into(), table.max_clip));
            control_quantity(&c.a, &c.z, &table)?
        }
    };
    let binned = bin_control(&v, opts.n_bins)?;
    let support = check_common_support(&c.weight, &a, &binned, &opts.contrast, opts.min_overlap)?;
    diags.push(("control_bins".into(), binned.n_bins() as f64));
    diags.push(("support_flags".into(), support.flags.len() as f64));
    for f in &support.flags {
        diags.push((format!("support_flag:a={};bin={}", f.level, f.bin), f.share));
    }
    Ok((c.with_bins(binned.bin_codes())?, diags))
}

fn estimate_outcome_bridge(c: &Cells, opts: &EstimateOptions) -> Result<EstimateReport> {
    let t = outcome_tables(c, opts.alpha);
    let tol = opts.tol.unwrap_or_else(|| sample_tol(c.len()));
    let sol = solve_outcome_bridge(&t.p_aw_given_z, &t.ey_given_z, tol)?;
    let rel = if sol.rhs_norm > 0.0 {
        sol.residual_norm / sol.rhs_norm
    } else {
        sol.residual_norm
    };
    let j = effect_from_outcome_bridge(&sol, &t.p_w, &t.a_levels, &opts.contrast)?;
    Ok(EstimateReport::new(EstimatorId::OutcomeBridge.name(), j, c.len())
        .diag("rank", sol.rank as f64)
        .diag("nullspace_dim", sol.nullspace_dim as f64)
        .diag("residual_norm", sol.residual_norm)
        .diag("rel_residual", rel)
        .diag("tol", tol))
}

fn columns_matrix(cols: &[&crate::data_model::Column], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, cols.len(), |i, j| cols[j].values[i])
}

fn demean(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
}

fn proxy_columns(ds: &Dataset) -> Vec<&crate::data_model::Column> {
    let w = ds.with_role(VariableRole::OutcomeProxy);
    if !w.is_empty() {
        return w;
    }
    let mut w = ds.with_role(VariableRole::ProxyW0);
    w.extend(ds.with_role(VariableRole::ProxyW1));
    w
}

/// Linear estimators report J = beta * sum_a pi(a) a.
fn estimate_linear(ds: &Dataset, id: EstimatorId, opts: &EstimateOptions) -> Result<EstimateReport> {
    let n = ds.n();
    let scale: f64 = opts.contrast.effective().iter().map(|(a, w)| a * w).sum();
    let mut y = DMatrix::from_column_slice(n, 1, &ds.outcome().values);
    let mut a = DMatrix::from_column_slice(n, 1, &ds.treatment().values);
    let mut z = columns_matrix(&ds.instruments()?, n);
    demean(&mut y);
    demean(&mut a);
    demean(&mut z);
    let y = DVector::from_column_slice(y.as_slice());
    let name = id.name();
    let (beta, se, mut report) = match id {
        EstimatorId::Ols => {
            let f = fit_ols(&y, &a)?;
            (f.coef[0], f.se(0), EstimateReport::new(name, 0.0, n))
        }
        EstimatorId::TwoSls => {
            let f = fit_2sls(&y, &a, &z)?;
            (f.coef[0], f.se(0), EstimateReport::new(name, 0.0, n))
        }
        _ => {
            let mut w = columns_matrix(&proxy_columns(ds), n);
            if w.ncols() == 0 {
                return Err(IccError::Schema("ICC needs at least one proxy column".into()));
            }
            demean(&mut w);
            let f = if id == EstimatorId::Icc {
                fit_icc(&y, &a, &z, &w, opts.icc)?
            } else {
                fit_icc_control_form(&y, &a, &z, &w, opts.icc)?
            };
            let se = f.se_beta().map(|s| s[0]).unwrap_or(f64::NAN);
            let mut r = EstimateReport::new(name, 0.0, n).diag("rank_used", f.rank_used as f64);
            for (k, s) in f.singular_values.iter().enumerate() {
                r = r.diag(format!("singular_value_{}", k + 1), *s);
            }
            (f.beta_hat[0], se, r)
        }
    };
    report.j_hat = beta * scale;
    report = report.diag("beta_hat", beta);
    if se.is_finite() {
        report = report.with_se(se * scale.abs());
    }
    Ok(report)
}

fn estimate_sieve(ds: &Dataset, opts: &EstimateOptions) -> Result<EstimateReport> {
    let n = ds.n();
    let a = ds.treatment();
    let w = proxy_columns(ds);
    let z = ds.instruments()?;
    let mut h_names = vec![a.name.as_str()];
    let mut h_cols: Vec<&[f64]> = vec![&a.values];
    for c in &w {
        h_names.push(&c.name);
        h_cols.push(&c.values);
    }
    let z_names: Vec<&str> = z.iter().map(|c| c.name.as_str()).collect();
    let z_cols: Vec<&[f64]> = z.iter().map(|c| c.values.as_slice()).collect();
    let (b, map) = build_features(&h_names, &h_cols, &opts.basis_h)?;
    let (cm, zmap) = build_features(&z_names, &z_cols, &opts.basis_z)?;
    let fit = fit_sieve_bridge(&ds.outcome().values, &b, &cm, opts.basis_h.ridge)?;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| w.iter().map(|c| c.values[i]).collect()).collect();
    let weights = vec![1.0 / n as f64; n];
    let mut r = effect_from_sieve(&fit.theta, &map, &rows, &weights, &opts.contrast)?;
    r = r
        .diag("bridge_features", map.n_features() as f64)
        .diag("instrument_features", zmap.n_features() as f64)
        .diag("rank", fit.rank as f64)
        .diag("nullspace_dim", fit.nullspace_dim as f64)
        .diag("residual_moment_norm", fit.residual_moment_norm);
    for d in fit.diagnostics.iter().chain(&map.diagnostics).chain(&zmap.diagnostics) {
        r = r.diag(format!("note: {d}"), f64::NAN);
    }
    Ok(r)
}
