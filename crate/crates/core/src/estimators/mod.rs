//! Moment-based estimators of the contrast effect J.
//!
//! Population and sample evaluation share one implementation: both are weighted
//! sums over [`Cells`](moments::Cells).

pub mod bias;
pub mod effects;
pub mod mc;
pub mod moments;
pub mod pipeline;

use serde::Serialize;

pub use bias::{ipw_bias_sides, reg_bias_sides};
pub use effects::{
    contrast_levels, phi_dr, phi_ipw, phi_ipw_with, phi_reg, tilde_phi_dr, tilde_phi_ipw, tilde_phi_reg, OracleTables,
};

pub use mc::{run_mc, Dgp, DgpSpec, McConfig, McRow, McTable, SeedLedger};
pub use moments::Cells;
pub use pipeline::{estimate, ControlSource, EstimateOptions, EstimatorId};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub j_hat: f64,
    pub se: Option<f64>,
    pub n_used: usize,
    pub diagnostics: Vec<(String, f64)>,
}

impl EstimateReport {
    pub fn new(estimator: impl Into<String>, j_hat: f64, n_used: usize) -> Self {
        EstimateReport {
            estimator: estimator.into(),
            j_hat,
            se: None,
            n_used,
            diagnostics: Vec::new(),
        }
    }

    pub fn with_se(mut self, se: f64) -> Self {
        self.se = Some(se);
        self
    }

    pub fn diag(mut self, name: impl Into<String>, value: f64) -> Self {
        self.diagnostics.push((name.into(), value));
        self
    }

    /// Normal-approximation 95% interval when a standard error is present.
    pub fn ci95(&self) -> Option<(f64, f64)> {
        self.se.map(|s| (self.j_hat - 1.959964 * s, self.j_hat + 1.959964 * s))
    }
}
