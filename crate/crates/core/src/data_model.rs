//! Typed dataset container, variable roles, categorical encoding and contrasts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IccError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableRole {
    Outcome,
    Treatment,
    Instrument,
    OutcomeProxy,
    ProxyW0,
    ProxyW1,
    Covariate,
    LatentConfounder,
    LatentDisturbance,
}

impl VariableRole {
    pub fn is_latent(self) -> bool {
        matches!(self, VariableRole::LatentConfounder | VariableRole::LatentDisturbance)
    }
}

/// Categorical codebook: original label -> stored code.
pub type Codebook = BTreeMap<i64, i64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ColumnKind {
    Continuous,
    Categorical { codebook: Codebook },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub role: VariableRole,
    pub kind: ColumnKind,
    pub values: Vec<f64>,
}

impl Column {
    pub fn continuous(name: impl Into<String>, role: VariableRole, values: Vec<f64>) -> Self {
        Column {
            name: name.into(),
            role,
            kind: ColumnKind::Continuous,
            values,
        }
    }

    /// Categorical column whose codes are already `0..k` (identity codebook).
    pub fn categorical(name: impl Into<String>, role: VariableRole, codes: &[usize], levels: usize) -> Self {
        let codebook = (0..levels as i64).map(|c| (c, c)).collect();
        Column {
            name: name.into(),
            role,
            kind: ColumnKind::Categorical { codebook },
            values: codes.iter().map(|&c| c as f64).collect(),
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, ColumnKind::Categorical { .. })
    }

    /// Number of levels for a contiguous-coded categorical column.
    pub fn levels(&self) -> Option<usize> {
        match &self.kind {
            ColumnKind::Categorical { codebook } => Some(codebook.len()),
            ColumnKind::Continuous => None,
        }
    }

    /// Values as category indices. Requires contiguous codes (see [`encode_categorical`]).
    pub fn codes(&self) -> Result<Vec<usize>> {
        let levels = self
            .levels()
            .ok_or_else(|| IccError::Schema(format!("column '{}' is not categorical", self.name)))?;
        self.values
            .iter()
            .map(|&v| {
                let c = v as i64;
                if c < 0 || c as usize >= levels || c as f64 != v {
                    Err(IccError::Schema(format!(
                        "column '{}' holds code {v} outside 0..{levels}; encode it first",
                        self.name
                    )))
                } else {
                    Ok(c as usize)
                }
            })
            .collect()
    }

    /// Original label for each stored code, sorted by code.
    pub fn labels(&self) -> Option<Vec<i64>> {
        match &self.kind {
            ColumnKind::Categorical { codebook } => {
                let mut pairs: Vec<(i64, i64)> = codebook.iter().map(|(&l, &c)| (c, l)).collect();
                pairs.sort();
                Some(pairs.into_iter().map(|(_, l)| l).collect())
            }
            ColumnKind::Continuous => None,
        }
    }
}

/// Immutable, complete-case dataset with declared variable roles.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    columns: Vec<Column>,
    simulated: bool,
    diagnostics: Vec<String>,
}

impl Dataset {
    pub fn new(columns: Vec<Column>, simulated: bool) -> Result<Self> {
        let n = columns.first().map(|c| c.values.len()).unwrap_or(0);
        let mut names = BTreeSet::new();
        for c in &columns {
            if !names.insert(c.name.as_str()) {
                return Err(IccError::Schema(format!("duplicate column '{}'", c.name)));
            }
            if c.values.len() != n {
                return Err(IccError::Schema(format!(
                    "column '{}' has {} rows, expected {n}",
                    c.name,
                    c.values.len()
                )));
            }
            if let Some(i) = c.values.iter().position(|v| !v.is_finite()) {
                return Err(IccError::Parse {
                    row: i + 1,
                    column: c.name.clone(),
                    message: "missing or non-finite value".into(),
                });
            }
            if c.role.is_latent() && !simulated {
                return Err(IccError::Schema(format!(
                    "latent role on column '{}' is only allowed on simulated datasets",
                    c.name
                )));
            }
            if let ColumnKind::Categorical { codebook } = &c.kind {
                let codes: BTreeSet<i64> = codebook.values().copied().collect();
                if let Some(i) = c
                    .values
                    .iter()
                    .position(|&v| v.fract() != 0.0 || !codes.contains(&(v as i64)))
                {
                    return Err(IccError::Schema(format!(
                        "column '{}' row {}: value {} is not a codebook code",
                        c.name,
                        i + 1,
                        c.values[i]
                    )));
                }
            }
        }
        let count = |r: VariableRole| columns.iter().filter(|c| c.role == r).count();
        if count(VariableRole::Outcome) != 1 {
            return Err(IccError::Schema(format!(
                "exactly one outcome column required, found {}",
                count(VariableRole::Outcome)
            )));
        }
        if count(VariableRole::Treatment) != 1 {
            return Err(IccError::Schema(format!(
                "exactly one treatment column required, found {}",
                count(VariableRole::Treatment)
            )));
        }
        Ok(Dataset {
            n,
            columns,
            simulated,
            diagnostics: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn is_simulated(&self) -> bool {
        self.simulated
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn with_role(&self, role: VariableRole) -> Vec<&Column> {
        self.columns.iter().filter(|c| c.role == role).collect()
    }

    pub fn outcome(&self) -> &Column {
        self.with_role(VariableRole::Outcome)[0]
    }

    pub fn treatment(&self) -> &Column {
        self.with_role(VariableRole::Treatment)[0]
    }

    /// Requires at least one instrument column; every ICC estimator needs one.
    pub fn instruments(&self) -> Result<Vec<&Column>> {
        let z = self.with_role(VariableRole::Instrument);
        if z.is_empty() {
            return Err(IccError::Schema("no instrument column declared".into()));
        }
        Ok(z)
    }

    /// Copy of the outcome column values.
    pub fn y(&self) -> Vec<f64> {
        self.outcome().values.clone()
    }

    /// Split rows by the joint code of all covariate columns (which must be
    /// categorical). Returns `(stratum key, sub-dataset)` pairs in key order.
    pub fn strata(&self) -> Result<Vec<(Vec<usize>, Dataset)>> {
        let covs = self.with_role(VariableRole::Covariate);
        if covs.is_empty() {
            return Ok(vec![(Vec::new(), self.clone())]);
        }
        let codes: Vec<Vec<usize>> = covs.iter().map(|c| c.codes()).collect::<Result<_>>()?;
        let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
        for i in 0..self.n {
            let key: Vec<usize> = codes.iter().map(|c| c[i]).collect();
            groups.entry(key).or_default().push(i);
        }
        groups
            .into_iter()
            .map(|(key, rows)| Ok((key, self.select_rows(&rows)?)))
            .collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        let columns = self
            .columns
            .iter()
            .map(|c| Column {
                values: rows.iter().map(|&i| c.values[i]).collect(),
                ..c.clone()
            })
            .collect();
        Dataset::new(columns, self.simulated)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))
            .map_err(csv_io)?;
        for i in 0..self.n {
            w.write_record(self.columns.iter().map(|c| format_value(c, c.values[i])))
                .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn format_value(c: &Column, v: f64) -> String {
    if c.is_categorical() {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn csv_io(e: csv::Error) -> IccError {
    IccError::Io(std::io::Error::other(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindSpec {
    #[default]
    Continuous,
    Categorical,
}

/// Declared role (and kind) of one CSV column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub role: VariableRole,
    #[serde(default)]
    pub kind: KindSpec,
}

pub type RoleMap = BTreeMap<String, ColumnSpec>;

pub fn load_csv(path: &Path, role_map: &RoleMap) -> Result<Dataset> {
    load_csv_with(path, role_map, false)
}

/// As [`load_csv`]; `simulated = true` admits latent-role columns.
pub fn load_csv_with(path: &Path, role_map: &RoleMap, simulated: bool) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_csv(&bytes, role_map, simulated)
}

pub fn parse_csv(bytes: &[u8], role_map: &RoleMap, simulated: bool) -> Result<Dataset> {
    if !role_map.values().any(|s| s.role == VariableRole::Outcome) {
        return Err(IccError::Schema("role map declares no outcome column".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| IccError::Schema(format!("cannot read header row: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    for name in role_map.keys() {
        if !header.iter().any(|h| h == name) {
            return Err(IccError::Schema(format!("column '{name}' not found in header")));
        }
    }
    let mut diagnostics = Vec::new();
    for h in &header {
        if !role_map.contains_key(h) {
            let msg = format!("column '{h}' has no declared role and was dropped");
            log::warn!("{msg}");
            diagnostics.push(msg);
        }
    }
    let kept: Vec<(usize, &String, &ColumnSpec)> = header
        .iter()
        .enumerate()
        .filter_map(|(j, h)| role_map.get(h).map(|s| (j, h, s)))
        .collect();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); kept.len()];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| IccError::Parse {
            row: i + 1,
            column: String::new(),
            message: e.to_string(),
        })?;
        for (k, (j, name, spec)) in kept.iter().enumerate() {
            let cell = rec.get(*j).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| IccError::Parse {
                row: i + 1,
                column: (*name).clone(),
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(IccError::Parse {
                    row: i + 1,
                    column: (*name).clone(),
                    message: format!("'{cell}' is not finite"),
                });
            }
            if spec.kind == KindSpec::Categorical && v.fract() != 0.0 {
                return Err(IccError::Parse {
                    row: i + 1,
                    column: (*name).clone(),
                    message: format!("'{cell}' is not an integer category code"),
                });
            }
            values[k].push(v);
        }
    }
    let columns = kept
        .into_iter()
        .zip(values)
        .map(|((_, name, spec), vals)| {
            let kind = match spec.kind {
                KindSpec::Continuous => ColumnKind::Continuous,
                KindSpec::Categorical => {
                    let codebook = vals.iter().map(|&v| (v as i64, v as i64)).collect();
                    ColumnKind::Categorical { codebook }
                }
            };
            Column {
                name: name.clone(),
                role: spec.role,
                kind,
                values: vals,
            }
        })
        .collect();
    let mut ds = Dataset::new(columns, simulated)?;
    ds.diagnostics = diagnostics;
    Ok(ds)
}

/// Re-code every categorical column to contiguous integers `0..k` in label order.
pub fn encode_categorical(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for c in &mut out.columns {
        if let ColumnKind::Categorical { codebook } = &c.kind {
            let present: BTreeSet<i64> = c.values.iter().map(|&v| v as i64).collect();
            // label order of the codes actually used
            let mut used: Vec<(i64, i64)> = codebook
                .iter()
                .filter(|(_, code)| present.contains(code))
                .map(|(&label, &code)| (label, code))
                .collect();
            used.sort();
            let remap: BTreeMap<i64, i64> = used
                .iter()
                .enumerate()
                .map(|(new, &(_, old))| (old, new as i64))
                .collect();
            let new_book: Codebook = used
                .iter()
                .enumerate()
                .map(|(new, &(label, _))| (label, new as i64))
                .collect();
            for v in &mut c.values {
                *v = remap[&(*v as i64)] as f64;
            }
            c.kind = ColumnKind::Categorical { codebook: new_book };
        }
    }
    out
}

/// Joint category index over several categorical columns (mixed radix,
/// first column most significant). Returns codes and the number of cells.
pub fn joint_codes(cols: &[&Column]) -> Result<(Vec<usize>, usize)> {
    let n = cols.first().map(|c| c.values.len()).unwrap_or(0);
    let mut codes = vec![0usize; n];
    let mut cells = 1usize;
    for c in cols {
        let k = c
            .levels()
            .ok_or_else(|| IccError::Schema(format!("column '{}' must be categorical", c.name)))?;
        let cc = c.codes()?;
        for (acc, v) in codes.iter_mut().zip(cc) {
            *acc = *acc * k + v;
        }
        cells *= k;
    }
    Ok((codes, cells))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastKind {
    DiscreteWeights,
    GridWeights,
}

/// Contrast function over treatment values together with its base measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawContrast")]
pub struct ContrastSpec {
    pub kind: ContrastKind,
    pub support: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawContrast {
    kind: ContrastKind,
    support: Vec<f64>,
    weights: Vec<f64>,
}

impl TryFrom<RawContrast> for ContrastSpec {
    type Error = IccError;
    fn try_from(r: RawContrast) -> Result<Self> {
        ContrastSpec::new(r.kind, r.support, r.weights)
    }
}

impl ContrastSpec {
    pub fn new(kind: ContrastKind, support: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if support.len() != weights.len() {
            return Err(IccError::InvalidContrast("support and weights differ in length".into()));
        }
        if support.is_empty() {
            return Err(IccError::InvalidContrast("empty support".into()));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(IccError::InvalidContrast("support must be strictly increasing".into()));
        }
        if support.iter().chain(&weights).any(|v| !v.is_finite()) {
            return Err(IccError::InvalidContrast("non-finite support or weight".into()));
        }
        if kind == ContrastKind::GridWeights && support.len() < 2 {
            return Err(IccError::InvalidContrast(
                "grid contrast needs at least two grid points".into(),
            ));
        }
        Ok(ContrastSpec { kind, support, weights })
    }

    /// Base-measure mass at each support point: counting measure for discrete
    /// contrasts, trapezoid weights for grids.
    pub fn base_measure(&self) -> Vec<f64> {
        match self.kind {
            ContrastKind::DiscreteWeights => vec![1.0; self.support.len()],
            ContrastKind::GridWeights => {
                let s = &self.support;
                let k = s.len();
                (0..k)
                    .map(|j| {
                        let left = if j > 0 { s[j] - s[j - 1] } else { 0.0 };
                        let right = if j + 1 < k { s[j + 1] - s[j] } else { 0.0 };
                        0.5 * (left + right)
                    })
                    .collect()
            }
        }
    }

    /// `(a_j, pi(a_j) * mu_A(a_j))` pairs with nonzero mass.
    pub fn effective(&self) -> Vec<(f64, f64)> {
        self.support
            .iter()
            .zip(self.weights.iter().zip(self.base_measure()))
            .map(|(&a, (&w, m))| (a, w * m))
            .filter(|&(_, w)| w != 0.0)
            .collect()
    }

    /// Effective weight per treatment level, given the level values.
    /// Fails if a support point with nonzero weight is not a level.
    pub fn weights_on_levels(&self, levels: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; levels.len()];
        for (a, w) in self.effective() {
            let j = levels
                .iter()
                .position(|&l| l == a)
                .ok_or_else(|| IccError::Domain(format!("contrast value {a} is not a treatment level")))?;
            out[j] += w;
        }
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> ContrastSpec {
        ContrastSpec {
            weights: self.weights.iter().map(|w| w * s).collect(),
            ..self.clone()
        }
    }

    /// Pointwise sum of two discrete contrasts over the union of supports.
    pub fn add(&self, other: &ContrastSpec) -> Result<ContrastSpec> {
        if self.kind != ContrastKind::DiscreteWeights || other.kind != ContrastKind::DiscreteWeights {
            return Err(IccError::InvalidContrast("only discrete contrasts can be added".into()));
        }
        let mut acc: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
        for c in [self, other] {
            for (&a, &w) in c.support.iter().zip(&c.weights) {
                acc.entry(a.to_bits() as i64 ^ i64::MIN).or_insert((a, 0.0)).1 += w;
            }
        }
        let mut pts: Vec<(f64, f64)> = acc.into_values().collect();
        pts.sort_by(|x, y| x.0.total_cmp(&y.0));
        ContrastSpec::new(
            ContrastKind::DiscreteWeights,
            pts.iter().map(|p| p.0).collect(),
            pts.iter().map(|p| p.1).collect(),
        )
    }
}

/// Average treatment effect contrast: weight +1 at `a1`, -1 at `a0`.
pub fn ate_contrast(a1: f64, a0: f64) -> Result<ContrastSpec> {
    if a1 == a0 {
        return Err(IccError::InvalidContrast(format!(
            "treated and control values are both {a1}"
        )));
    }
    let (support, weights) = if a0 < a1 {
        (vec![a0, a1], vec![-1.0, 1.0])
    } else {
        (vec![a1, a0], vec![1.0, -1.0])
    };
    ContrastSpec::new(ContrastKind::DiscreteWeights, support, weights)
}
