//! Control variables: within-cell conditional CDF ranks, the oracle control
//! given U, the U-averaged control quantity, binning and support checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bridge_discrete::ControlQuantityTable;
use crate::data_model::ContrastSpec;
use crate::error::{IccError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    /// F(A | Z), no confounder in the first stage.
    EmpiricalNoU,
    /// F(A | Z, U), simulated data only.
    OracleVu,
    /// Sum over u of p(u) F(A | Z, u), identified through control bridges.
    ControlQuantity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlColumn {
    pub values: Vec<f64>,
    pub kind: ControlKind,
    /// Bin edges covering [0, 1], strictly increasing.
    pub bins: Option<Vec<f64>>,
    /// Bin index per row, present together with `bins`.
    pub bin_index: Option<Vec<usize>>,
}

impl ControlColumn {
    pub fn new(values: Vec<f64>, kind: ControlKind) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(IccError::Domain(format!("control value {v} outside [0, 1]")));
        }
        Ok(ControlColumn {
            values,
            kind,
            bins: None,
            bin_index: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_bins(&self) -> usize {
        self.bins.as_ref().map_or(1, |b| b.len() - 1)
    }

    /// Bin per row, or a single bin when unbinned.
    pub fn bin_codes(&self) -> Vec<usize> {
        self.bin_index.clone().unwrap_or_else(|| vec![0; self.len()])
    }
}

/// Weighted mid-CDF of `a` within each group:
/// P(A < a_i | g) + P(A = a_i | g) / 2.
pub fn weighted_mid_cdf(weight: &[f64], a: &[f64], groups: &[usize]) -> Vec<f64> {
    let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let mut v = vec![0.0; a.len()];
    for rows in by_group.values_mut() {
        rows.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
        let total: f64 = rows.iter().map(|&i| weight[i]).sum();
        let mut below = 0.0;
        let mut k = 0;
        while k < rows.len() {
            let mut end = k;
            let mut tied = 0.0;
            while end < rows.len() && a[rows[end]] == a[rows[k]] {
                tied += weight[rows[end]];
                end += 1;
            }
            let mid = ((below + 0.5 * tied) / total).clamp(0.0, 1.0);
            for &i in &rows[k..end] {
                v[i] = mid;
            }
            below += tied;
            k = end;
        }
    }
    v
}

fn check_cell_sizes(groups: &[usize], what: &str) -> Result<()> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &g in groups {
        *counts.entry(g).or_default() += 1;
    }
    match counts.iter().find(|(_, &c)| c < 2) {
        Some((g, _)) => Err(IccError::CellSize(format!("{what} cell {g} has a single observation"))),
        None => Ok(()),
    }
}

/// Within-z midrank control (rank - 0.5) / n_cell.
pub fn empirical_cdf_control(a: &[f64], z: &[usize]) -> Result<ControlColumn> {
    if a.len() != z.len() {
        return Err(IccError::Dimension("A and Z lengths differ".into()));
    }
    check_cell_sizes(z, "instrument")?;
    let w = vec![1.0; a.len()];
    ControlColumn::new(weighted_mid_cdf(&w, a, z), ControlKind::EmpiricalNoU)
}

/// Within-(z, u) midrank control; requires the latent confounder.
pub fn oracle_control(a: &[f64], z: &[usize], u: &[usize]) -> Result<ControlColumn> {
    if a.len() != z.len() || a.len() != u.len() {
        return Err(IccError::Dimension("A, Z and U lengths differ".into()));
    }
    let d_u = u.iter().max().map_or(1, |m| m + 1);
    let g: Vec<usize> = z.iter().zip(u).map(|(z, u)| z * d_u + u).collect();
    check_cell_sizes(&g, "(instrument, confounder)")?;
    let w = vec![1.0; a.len()];
    ControlColumn::new(weighted_mid_cdf(&w, a, &g), ControlKind::OracleVu)
}

/// Population counterpart of the rank controls over weighted atoms.
pub fn population_cdf_control(weight: &[f64], a: &[f64], groups: &[usize], kind: ControlKind) -> Result<ControlColumn> {
    ControlColumn::new(weighted_mid_cdf(weight, a, groups), kind)
}

/// Row-wise lookup of V(a, z) from a solved control-quantity table.
pub fn control_quantity(a_level: &[usize], z: &[usize], table: &ControlQuantityTable) -> Result<ControlColumn> {
    let values = a_level
        .iter()
        .zip(z)
        .map(|(&a, &z)| table.lookup(a, z))
        .collect::<Result<Vec<_>>>()?;
    ControlColumn::new(values, ControlKind::ControlQuantity)
}

/// Relative tolerance for treating control values as the same atom.
const TIE_RTOL: f64 = 1e-8;

/// Equal-mass binning of a sample control (weight 1/n per row).
pub fn bin_control(v: &ControlColumn, n_bins: usize) -> Result<ControlColumn> {
    if n_bins > v.len() {
        return Err(IccError::Binning(format!("{n_bins} bins for {} rows", v.len())));
    }
    let w = vec![1.0 / v.len() as f64; v.len()];
    bin_control_weighted(v, &w, n_bins)
}

/// Equal-mass binning under weights. Values equal up to a relative 1e-8 share a
/// bin. When there are at most `n_bins` distinct values each gets its own bin;
/// otherwise a value goes to bin floor(n_bins * mid-mass), and empty bins are
/// dropped.
pub fn bin_control_weighted(v: &ControlColumn, weight: &[f64], n_bins: usize) -> Result<ControlColumn> {
    if n_bins < 2 {
        return Err(IccError::Binning("need at least 2 bins".into()));
    }
    if weight.len() != v.len() {
        return Err(IccError::Dimension("weights and control lengths differ".into()));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v.values[i].total_cmp(&v.values[j]));
    // Group tied values.
    let mut groups: Vec<(Vec<usize>, f64)> = Vec::new();
    for &i in &order {
        let x = v.values[i];
        match groups.last_mut() {
            Some((rows, _)) if (x - v.values[rows[0]]).abs() <= TIE_RTOL * x.abs().max(1.0) => rows.push(i),
            _ => groups.push((vec![i], 0.0)),
        }
    }
    for (rows, mass) in &mut groups {
        *mass = rows.iter().map(|&i| weight[i]).sum();
    }
    let total: f64 = groups.iter().map(|g| g.1).sum();
    let raw: Vec<usize> = if groups.len() <= n_bins {
        (0..groups.len()).collect()
    } else {
        let mut cum = 0.0;
        groups
            .iter()
            .map(|(_, m)| {
                let mid = (cum + 0.5 * m) / total;
                cum += m;
                ((n_bins as f64 * mid).floor() as usize).min(n_bins - 1)
            })
            .collect()
    };
    // Renumber contiguously.
    let mut bin_of_group = Vec::with_capacity(raw.len());
    let mut next = 0usize;
    for (k, &b) in raw.iter().enumerate() {
        if k > 0 && b != raw[k - 1] {
            next += 1;
        }
        bin_of_group.push(next);
    }
    let n_used = next + 1;
    let mut edges = vec![0.0];
    for k in 1..groups.len() {
        if bin_of_group[k] != bin_of_group[k - 1] {
            let lo = v.values[*groups[k - 1].0.last().unwrap()];
            let hi = v.values[groups[k].0[0]];
            edges.push(0.5 * (lo + hi));
        }
    }
    edges.push(1.0);
    debug_assert_eq!(edges.len(), n_used + 1);
    let mut index = vec![0; v.len()];
    for (k, (rows, _)) in groups.iter().enumerate() {
        for &i in rows {
            index[i] = bin_of_group[k];
        }
    }
    Ok(ControlColumn {
        values: v.values.clone(),
        kind: v.kind,
        bins: Some(edges),
        bin_index: Some(index),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportFlag {
    pub level: f64,
    pub bin: usize,
    /// Marginal mass of the bin.
    pub bin_mass: f64,
    /// P(A = level | bin).
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommonSupportReport {
    pub n_bins: usize,
    pub min_overlap: f64,
    pub flags: Vec<SupportFlag>,
}

impl CommonSupportReport {
    pub fn is_clean(&self) -> bool {
        self.flags.is_empty()
    }
}

/// Flag every (contrast level, control bin) where P(A = level | bin) is below
/// `min_overlap` (or zero when `min_overlap` is 0) while the bin has mass.
pub fn check_common_support(
    weight: &[f64],
    a: &[f64],
    v: &ControlColumn,
    c: &ContrastSpec,
    min_overlap: f64,
) -> Result<CommonSupportReport> {
    let bins = v.bin_codes();
    let nb = v.n_bins();
    let mut levels: Vec<f64> = a.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let pi = c.weights_on_levels(&levels)?;
    let mut bin_mass = vec![0.0; nb];
    for (i, &b) in bins.iter().enumerate() {
        bin_mass[b] += weight[i];
    }
    let mut flags = Vec::new();
    for (l, level) in levels.iter().enumerate() {
        if pi[l] == 0.0 {
            continue;
        }
        let mut m = vec![0.0; nb];
        for (i, &b) in bins.iter().enumerate() {
            if a[i] == *level {
                m[b] += weight[i];
            }
        }
        for b in 0..nb {
            if bin_mass[b] <= 0.0 {
                continue;
            }
            let share = m[b] / bin_mass[b];
            if share <= 0.0 || share < min_overlap {
                flags.push(SupportFlag {
                    level: *level,
                    bin: b,
                    bin_mass: bin_mass[b],
                    share,
                });
            }
        }
    }
    Ok(CommonSupportReport {
        n_bins: nb,
        min_overlap,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::ate_contrast;
    use proptest::prelude::*;

    #[test]
    fn midrank_examples() {
        let v = empirical_cdf_control(&[2.0, 5.0, 3.0, 7.0], &[0; 4]).unwrap();
        assert_eq!(v.values, vec![0.125, 0.625, 0.375, 0.875]);
        let v = empirical_cdf_control(&[1.0; 4], &[0; 4]).unwrap();
        assert_eq!(v.values, vec![0.5; 4]);
    }

    #[test]
    fn singleton_cell_rejected() {
        assert!(matches!(
            empirical_cdf_control(&[1.0, 2.0, 3.0], &[0, 0, 1]),
            Err(IccError::CellSize(_))
        ));
        assert!(matches!(
            oracle_control(&[1.0, 2.0, 3.0, 4.0], &[0; 4], &[0, 0, 0, 1]),
            Err(IccError::CellSize(_))
        ));
    }

    #[test]
    fn single_confounder_matches_empirical() {
        let a = [0.3, 1.2, -0.4, 2.2, 0.0, 0.1];
        let z = [0, 1, 0, 1, 1, 0];
        assert_eq!(
            oracle_control(&a, &z, &[0; 6]).unwrap().values,
            empirical_cdf_control(&a, &z).unwrap().values
        );
    }

    #[test]
    fn uniform_bins_equal_count() {
        let n = 103;
        let v = ControlColumn::new(
            (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect(),
            ControlKind::EmpiricalNoU,
        )
        .unwrap();
        let b = bin_control(&v, 5).unwrap();
        let mut counts = [0usize; 5];
        for &i in b.bin_index.as_ref().unwrap() {
            counts[i] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        let edges = b.bins.unwrap();
        assert_eq!(edges.len(), 6);
        assert!(edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn one_bin_per_row_and_errors() {
        let v = ControlColumn::new(vec![0.1, 0.9, 0.5, 0.3], ControlKind::EmpiricalNoU).unwrap();
        let b = bin_control(&v, 4).unwrap();
        assert_eq!(b.bin_index.unwrap(), vec![0, 3, 2, 1]);
        assert!(matches!(bin_control(&v, 5), Err(IccError::Binning(_))));
        assert!(matches!(bin_control(&v, 1), Err(IccError::Binning(_))));
    }

    #[test]
    fn deterministic_treatment_flags_half_the_bins() {
        let n = 200;
        let vals: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let a: Vec<f64> = vals.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
        let v = bin_control(&ControlColumn::new(vals, ControlKind::EmpiricalNoU).unwrap(), 10).unwrap();
        let w = vec![1.0 / n as f64; n];
        let r = check_common_support(&w, &a, &v, &ate_contrast(1.0, 0.0).unwrap(), 0.0).unwrap();
        assert_eq!(r.flags.len(), 10);
        assert_eq!(r.flags.iter().filter(|f| f.level == 1.0).count(), 5);
        let alternating: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let r = check_common_support(&w, &alternating, &v, &ate_contrast(1.0, 0.0).unwrap(), 0.1).unwrap();
        assert!(r.is_clean());
    }

    #[test]
    fn out_of_range_values_rejected() {
        assert!(ControlColumn::new(vec![1.5], ControlKind::OracleVu).is_err());
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(a in prop::collection::vec(-5.0f64..5.0, 4..40), seed in 0usize..3) {
            let z: Vec<usize> = (0..a.len()).map(|i| (i + seed) % 2).collect();
            let v1 = empirical_cdf_control(&a, &z).unwrap();
            let t: Vec<f64> = a.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            let v2 = empirical_cdf_control(&t, &z).unwrap();
            prop_assert_eq!(&v1.values, &v2.values);
            for cell in 0..2 {
                let vals: Vec<f64> = v1.values.iter().zip(&z).filter(|(_, &g)| g == cell).map(|(v, _)| *v).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                prop_assert!((mean - 0.5).abs() < 1e-12);
                prop_assert!(vals.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }

        #[test]
        fn permutation_equivariance(
            (a, perm) in (2usize..8).prop_flat_map(|k| (
                prop::collection::vec(0.0f64..1.0, 4 * k),
                Just((0..4 * k).collect::<Vec<usize>>()).prop_shuffle(),
            ))
        ) {
            let n = a.len();
            let z: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let u: Vec<usize> = (0..n).map(|i| (i % 4) / 2).collect();
            let v = oracle_control(&a, &z, &u).unwrap();
            let pa: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
            let pz: Vec<usize> = perm.iter().map(|&i| z[i]).collect();
            let pu: Vec<usize> = perm.iter().map(|&i| u[i]).collect();
            let pv = oracle_control(&pa, &pz, &pu).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(pv.values[k], v.values[i]);
            }
        }
    }
}
