//! Cluster-structured trial data.
//!
//! A [`TrialDataset`] holds one [`ClusterBlock`] per randomized cluster. Each
//! block carries the cluster's arm, a possibly-missing continuous outcome per
//! subject and a fully observed covariate matrix. Model design matrices are
//! declared with a [`ModelSpec`] and materialized by [`design_matrix`].

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Literal token treated as a missing outcome (besides the empty cell).
pub const MISSING_TOKEN: &str = "NA";

/// Reserved term name for the treatment indicator in model specifications.
pub const ARM_TERM: &str = "A";

/// Prefix of the cluster summary columns added by [`TrialDataset::append_cluster_means`].
pub const CLUSTER_MEAN_PREFIX: &str = "mean_";

/// Default maximum number of distinct values for a covariate to count as categorical.
pub const DEFAULT_CATEGORICAL_LEVELS: usize = 2;

/// One randomized cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBlock {
    pub id: String,
    pub arm: u8,
    /// `None` marks a missing outcome (R_ij = 0).
    pub outcomes: Vec<Option<f64>>,
    /// n_i × P covariate matrix.
    pub covariates: DMatrix<f64>,
}

impl ClusterBlock {
    pub fn new(
        id: impl Into<String>,
        arm: u8,
        outcomes: Vec<Option<f64>>,
        covariates: DMatrix<f64>,
    ) -> Result<Self> {
        let id = id.into();
        if arm > 1 {
            return Err(Error::Validation(format!(
                "cluster {id}: arm must be 0 or 1, got {arm}"
            )));
        }
        if outcomes.is_empty() {
            return Err(Error::Validation(format!("cluster {id} has no subjects")));
        }
        if covariates.nrows() != outcomes.len() {
            return Err(Error::Dimension(format!(
                "cluster {id}: {} outcomes but {} covariate rows",
                outcomes.len(),
                covariates.nrows()
            )));
        }
        if let Some(v) = covariates.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "cluster {id}: non-finite covariate value {v}"
            )));
        }
        if let Some(v) = outcomes.iter().flatten().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "cluster {id}: non-finite outcome value {v}"
            )));
        }
        Ok(Self {
            id,
            arm,
            outcomes,
            covariates,
        })
    }

    pub fn size(&self) -> usize {
        self.outcomes.len()
    }

    /// Observation indicators R_ij.
    pub fn observed(&self) -> Vec<bool> {
        self.outcomes.iter().map(Option::is_some).collect()
    }

    pub fn n_observed(&self) -> usize {
        self.outcomes.iter().filter(|y| y.is_some()).count()
    }
}

/// A validated cluster-randomized trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    clusters: Vec<ClusterBlock>,
    covariate_names: Vec<String>,
    categorical: Vec<bool>,
    n_total: usize,
    p_treat: f64,
}

impl TrialDataset {
    /// Validates the blocks and sets `p_treat` to the fraction of treated clusters.
    pub fn new(clusters: Vec<ClusterBlock>, covariate_names: Vec<String>) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::Validation("dataset has no clusters".into()));
        }
        let mut seen = HashSet::new();
        for name in &covariate_names {
            validate_covariate_name(name)?;
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate covariate name '{name}'"
                )));
            }
        }
        let mut ids = HashSet::new();
        for block in &clusters {
            if block.covariates.ncols() != covariate_names.len() {
                return Err(Error::Dimension(format!(
                    "cluster {} has {} covariate columns, expected {}",
                    block.id,
                    block.covariates.ncols(),
                    covariate_names.len()
                )));
            }
            if !ids.insert(block.id.as_str()) {
                return Err(Error::Validation(format!(
                    "cluster id {} appears in more than one block",
                    block.id
                )));
            }
        }
        let treated = clusters.iter().filter(|c| c.arm == 1).count();
        if treated == 0 || treated == clusters.len() {
            return Err(Error::Validation(format!(
                "dataset must contain clusters in both arms (treated: {treated} of {})",
                clusters.len()
            )));
        }
        let n_total = clusters.iter().map(ClusterBlock::size).sum();
        let p_treat = treated as f64 / clusters.len() as f64;
        let mut data = Self {
            categorical: vec![false; covariate_names.len()],
            clusters,
            covariate_names,
            n_total,
            p_treat,
        };
        data.flag_categorical(DEFAULT_CATEGORICAL_LEVELS);
        Ok(data)
    }

    pub fn clusters(&self) -> &[ClusterBlock] {
        &self.clusters
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn n_observed(&self) -> usize {
        self.clusters.iter().map(ClusterBlock::n_observed).sum()
    }

    pub fn max_cluster_size(&self) -> usize {
        self.clusters.iter().map(ClusterBlock::size).max().unwrap_or(0)
    }

    pub fn p_treat(&self) -> f64 {
        self.p_treat
    }

    pub fn with_p_treat(mut self, p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Config(format!(
                "treatment probability must lie in (0,1), got {p}"
            )));
        }
        self.p_treat = p;
        Ok(self)
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    }

    pub fn is_categorical(&self, name: &str) -> Result<bool> {
        Ok(self.categorical[self.covariate_index(name)?])
    }

    /// Flags every covariate with at most `max_levels` distinct values as categorical.
    pub fn flag_categorical(&mut self, max_levels: usize) {
        for k in 0..self.covariate_names.len() {
            let mut levels: Vec<f64> = Vec::new();
            'rows: for block in &self.clusters {
                for &v in block.covariates.column(k).iter() {
                    if !levels.contains(&v) {
                        levels.push(v);
                        if levels.len() > max_levels {
                            break 'rows;
                        }
                    }
                }
            }
            self.categorical[k] = levels.len() <= max_levels;
        }
    }

    pub fn set_categorical(&mut self, name: &str, categorical: bool) -> Result<()> {
        let k = self.covariate_index(name)?;
        self.categorical[k] = categorical;
        Ok(())
    }

    /// Adds `mean_<name>` cluster-summary columns: the within-cluster mean, or
    /// the within-cluster mode (smallest value on ties) for categorical covariates.
    /// An existing summary column of the same name is recomputed in place.
    pub fn append_cluster_means<S: AsRef<str>>(&self, names: &[S]) -> Result<TrialDataset> {
        let mut out = self.clone();
        for name in names {
            let name = name.as_ref();
            let k = self.covariate_index(name)?;
            let categorical = self.categorical[k];
            let target = format!("{CLUSTER_MEAN_PREFIX}{name}");
            let summaries: Vec<f64> = self
                .clusters
                .iter()
                .map(|b| {
                    let col: Vec<f64> = b.covariates.column(k).iter().copied().collect();
                    if categorical {
                        mode_smallest(&col)
                    } else {
                        col.iter().sum::<f64>() / col.len() as f64
                    }
                })
                .collect();
            let existing = out.covariate_names.iter().position(|n| *n == target);
            match existing {
                Some(col) => {
                    for (block, &s) in out.clusters.iter_mut().zip(&summaries) {
                        block.covariates.column_mut(col).fill(s);
                    }
                }
                None => {
                    for (block, &s) in out.clusters.iter_mut().zip(&summaries) {
                        let n = block.size();
                        let cols = block.covariates.ncols();
                        let grown = std::mem::replace(&mut block.covariates, DMatrix::zeros(0, 0))
                            .insert_column(cols, s);
                        debug_assert_eq!(grown.nrows(), n);
                        block.covariates = grown;
                    }
                    out.covariate_names.push(target);
                    out.categorical.push(categorical);
                }
            }
        }
        Ok(out)
    }

    /// Copy of the dataset with clusters reordered by `order` (a permutation of cluster indices).
    pub fn permuted(&self, order: &[usize]) -> Result<TrialDataset> {
        let mut check: Vec<usize> = order.to_vec();
        check.sort_unstable();
        if check != (0..self.clusters.len()).collect::<Vec<_>>() {
            return Err(Error::Validation("cluster order is not a permutation".into()));
        }
        let mut out = self.clone();
        out.clusters = order.iter().map(|&i| self.clusters[i].clone()).collect();
        Ok(out)
    }

    /// Writes the dataset in the CSV layout read by [`load_csv`].
    pub fn write_csv<W: Write>(&self, writer: W, schema: &CsvSchema) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            schema.cluster.clone(),
            schema.arm.clone(),
            schema.outcome.clone(),
        ];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for block in &self.clusters {
            for j in 0..block.size() {
                let mut rec = vec![
                    block.id.clone(),
                    block.arm.to_string(),
                    block.outcomes[j]
                        .map(|v| v.to_string())
                        .unwrap_or_else(|| MISSING_TOKEN.to_string()),
                ];
                rec.extend(block.covariates.row(j).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn validate_covariate_name(name: &str) -> Result<()> {
    if name.is_empty() || name == ARM_TERM || name.contains(':') {
        return Err(Error::Validation(format!(
            "covariate name '{name}' is reserved or contains ':'"
        )));
    }
    Ok(())
}

fn mode_smallest(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut best = sorted[0];
    let mut best_count = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        // strict > keeps the smallest value among ties
        if j - i > best_count {
            best_count = j - i;
            best = sorted[i];
        }
        i = j;
    }
    best
}

/// Column roles for CSV input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub cluster: String,
    pub arm: String,
    pub outcome: String,
    /// Covariate columns; empty means "every other column".
    pub covariates: Vec<String>,
}

impl CsvSchema {
    pub fn new(cluster: &str, arm: &str, outcome: &str, covariates: &[&str]) -> Self {
        Self {
            cluster: cluster.into(),
            arm: arm.into(),
            outcome: outcome.into(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TrialDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

/// Reads one row per subject. Clusters keep the order of their first row and
/// subjects keep file order within a cluster.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<TrialDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("column '{name}' not found in header")))
    };
    let cluster_col = find(&schema.cluster)?;
    let arm_col = find(&schema.arm)?;
    let outcome_col = find(&schema.outcome)?;
    let covariate_names: Vec<String> = if schema.covariates.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| ![cluster_col, arm_col, outcome_col].contains(i))
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        schema.covariates.clone()
    };
    let cov_cols = covariate_names
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    struct Pending {
        arm: u8,
        outcomes: Vec<Option<f64>>,
        rows: Vec<Vec<f64>>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, Pending> = HashMap::new();

    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let row = idx + 1;
        let cell = |col: usize| record.get(col).unwrap_or("");
        let id = cell(cluster_col).to_string();
        if id.is_empty() {
            return Err(Error::Validation(format!("row {row}: empty cluster id")));
        }
        let arm_raw = cell(arm_col);
        let arm_val: f64 = arm_raw.parse().map_err(|_| Error::Parse {
            row,
            column: schema.arm.clone(),
            message: format!("'{arm_raw}' is not numeric"),
        })?;
        let arm = if arm_val == 0.0 {
            0
        } else if arm_val == 1.0 {
            1
        } else {
            return Err(Error::Validation(format!(
                "row {row}: arm value {arm_raw} in cluster {id} is not 0 or 1"
            )));
        };
        let y_raw = cell(outcome_col);
        let outcome = if y_raw.is_empty() || y_raw == MISSING_TOKEN {
            None
        } else {
            Some(y_raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                column: schema.outcome.clone(),
                message: format!("'{y_raw}' is not numeric"),
            })?)
        };
        let mut covs = Vec::with_capacity(cov_cols.len());
        for (name, &col) in covariate_names.iter().zip(&cov_cols) {
            let raw = cell(col);
            if raw.is_empty() || raw == MISSING_TOKEN {
                return Err(Error::Validation(format!(
                    "row {row}: missing value for covariate '{name}'"
                )));
            }
            covs.push(raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                column: name.clone(),
                message: format!("'{raw}' is not numeric"),
            })?);
        }
        match pending.get_mut(&id) {
            Some(p) => {
                if p.arm != arm {
                    return Err(Error::Validation(format!(
                        "cluster {id} has rows with arm {} and arm {arm}",
                        p.arm
                    )));
                }
                p.outcomes.push(outcome);
                p.rows.push(covs);
            }
            None => {
                order.push(id.clone());
                pending.insert(
                    id,
                    Pending {
                        arm,
                        outcomes: vec![outcome],
                        rows: vec![covs],
                    },
                );
            }
        }
    }

    let p = covariate_names.len();
    let clusters = order
        .into_iter()
        .map(|id| {
            let block = pending.remove(&id).expect("cluster recorded in order");
            let n = block.outcomes.len();
            let covariates = DMatrix::from_fn(n, p, |i, k| block.rows[i][k]);
            ClusterBlock::new(id, block.arm, block.outcomes, covariates)
        })
        .collect::<Result<Vec<_>>>()?;
    TrialDataset::new(clusters, covariate_names)
}

/// A term of a nuisance model design.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Covariate(String),
    /// The treatment indicator A_i.
    Arm,
    /// A_i × covariate.
    ArmInteraction(String),
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::Config("empty model term".into()));
        }
        if s == ARM_TERM {
            return Ok(Term::Arm);
        }
        if let Some((lhs, rhs)) = s.split_once(':') {
            let (lhs, rhs) = (lhs.trim(), rhs.trim());
            return match (lhs == ARM_TERM, rhs == ARM_TERM) {
                (true, false) if !rhs.is_empty() && !rhs.contains(':') => {
                    Ok(Term::ArmInteraction(rhs.to_string()))
                }
                (false, true) if !lhs.is_empty() && !lhs.contains(':') => {
                    Ok(Term::ArmInteraction(lhs.to_string()))
                }
                _ => Err(Error::Config(format!(
                    "unsupported interaction '{s}': only {ARM_TERM}:<covariate> is allowed"
                ))),
            };
        }
        Ok(Term::Covariate(s.to_string()))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Covariate(c) => write!(f, "{c}"),
            Term::Arm => write!(f, "{ARM_TERM}"),
            Term::ArmInteraction(c) => write!(f, "{ARM_TERM}:{c}"),
        }
    }
}

/// Ordered list of terms of a nuisance model; the intercept is always included.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct ModelSpec {
    terms: Vec<Term>,
}

impl ModelSpec {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &terms {
            if !seen.insert(t) {
                return Err(Error::Config(format!("duplicate model term '{t}'")));
            }
        }
        Ok(Self { terms })
    }

    pub fn intercept_only() -> Self {
        Self::default()
    }

    /// Parses a comma-separated term list such as `X1,mean_X1,A,A:X1`.
    pub fn parse(list: &str) -> Result<Self> {
        let terms = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(Term::from_str)
            .collect::<Result<Vec<_>>>()?;
        Self::new(terms)
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn has_intercept(&self) -> bool {
        true
    }

    pub fn contains(&self, term: &Term) -> bool {
        self.terms.contains(term)
    }

    /// Adds the arm indicator if it is not already a term.
    pub fn with_arm(mut self) -> Self {
        if !self.terms.contains(&Term::Arm) {
            self.terms.push(Term::Arm);
        }
        self
    }

    /// Number of design columns, intercept included.
    pub fn n_columns(&self) -> usize {
        self.terms.len() + 1
    }

    pub fn column_names(&self) -> Vec<String> {
        std::iter::once("(Intercept)".to_string())
            .chain(self.terms.iter().map(Term::to_string))
            .collect()
    }

    pub fn resolve(&self, data: &TrialDataset) -> Result<ResolvedSpec> {
        let columns = self
            .terms
            .iter()
            .map(|t| {
                Ok(match t {
                    Term::Covariate(c) => ResolvedTerm::Covariate(data.covariate_index(c)?),
                    Term::Arm => ResolvedTerm::Arm,
                    Term::ArmInteraction(c) => {
                        ResolvedTerm::ArmInteraction(data.covariate_index(c)?)
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ResolvedSpec { columns })
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.terms.iter().map(Term::to_string).collect();
        write!(f, "{}", names.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ResolvedTerm {
    Covariate(usize),
    Arm,
    ArmInteraction(usize),
}

/// A [`ModelSpec`] bound to a dataset's column indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedSpec {
    columns: Vec<ResolvedTerm>,
}

impl ResolvedSpec {
    pub fn n_columns(&self) -> usize {
        self.columns.len() + 1
    }

    /// Writes the design row of subject `j` in `block`, evaluated at arm `arm`.
    pub fn fill_row(&self, block: &ClusterBlock, j: usize, arm: u8, out: &mut [f64]) {
        let a = f64::from(arm);
        out[0] = 1.0;
        for (slot, col) in out[1..].iter_mut().zip(&self.columns) {
            *slot = match *col {
                ResolvedTerm::Covariate(k) => block.covariates[(j, k)],
                ResolvedTerm::Arm => a,
                ResolvedTerm::ArmInteraction(k) => a * block.covariates[(j, k)],
            };
        }
    }

    /// n_i × k design for every subject of a cluster, evaluated at arm `arm`.
    pub fn cluster_design(&self, block: &ClusterBlock, arm: u8) -> DMatrix<f64> {
        let k = self.n_columns();
        let mut m = DMatrix::zeros(block.size(), k);
        let mut row = vec![0.0; k];
        for j in 0..block.size() {
            self.fill_row(block, j, arm, &mut row);
            for (c, v) in row.iter().enumerate() {
                m[(j, c)] = *v;
            }
        }
        m
    }
}

/// Position of a design-matrix row in the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowRef {
    pub cluster: usize,
    pub subject: usize,
}

/// Intercept-prepended design over the selected rows, with a map back to
/// (cluster, subject) positions.
pub fn design_matrix(
    data: &TrialDataset,
    spec: &ModelSpec,
    arm_filter: Option<u8>,
    observed_only: bool,
) -> Result<(DMatrix<f64>, Vec<RowRef>)> {
    let resolved = spec.resolve(data)?;
    let mut rows = Vec::new();
    for (i, block) in data.clusters().iter().enumerate() {
        if arm_filter.is_some_and(|a| a != block.arm) {
            continue;
        }
        for (j, y) in block.outcomes.iter().enumerate() {
            if observed_only && y.is_none() {
                continue;
            }
            rows.push(RowRef {
                cluster: i,
                subject: j,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptySelection(format!(
            "no rows for arm filter {arm_filter:?} (observed only: {observed_only})"
        )));
    }
    let k = resolved.n_columns();
    let mut x = DMatrix::zeros(rows.len(), k);
    let mut buf = vec![0.0; k];
    for (r, pos) in rows.iter().enumerate() {
        let block = &data.clusters()[pos.cluster];
        resolved.fill_row(block, pos.subject, block.arm, &mut buf);
        for (c, v) in buf.iter().enumerate() {
            x[(r, c)] = *v;
        }
    }
    Ok((x, rows))
}

/// Outcome values at the given rows (missing outcomes become NaN).
pub fn outcome_vector(data: &TrialDataset, rows: &[RowRef]) -> Vec<f64> {
    rows.iter()
        .map(|r| data.clusters()[r.cluster].outcomes[r.subject].unwrap_or(f64::NAN))
        .collect()
}

/// Observation indicators (1.0 / 0.0) at the given rows.
pub fn observed_vector(data: &TrialDataset, rows: &[RowRef]) -> Vec<f64> {
    rows.iter()
        .map(|r| {
            if data.clusters()[r.cluster].outcomes[r.subject].is_some() {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIMPLE: &str = "id,A,Y,X1\n1,0,1.0,1\n1,0,2.0,2\n1,0,3.0,3\n2,1,4.0,1\n2,1,5.0,5\n2,1,6.0,7\n";

    fn schema() -> CsvSchema {
        CsvSchema::new("id", "A", "Y", &["X1"])
    }

    #[test]
    fn loads_two_balanced_clusters() {
        let d = read_csv(SIMPLE.as_bytes(), &schema()).unwrap();
        assert_eq!(d.n_clusters(), 2);
        assert_eq!(d.n_total(), 6);
        assert_eq!(d.p_treat(), 0.5);
        assert_eq!(d.clusters()[1].covariates[(2, 0)], 7.0);
    }

    #[test]
    fn arm_varying_within_cluster_names_cluster() {
        let csv = "id,A,Y,X1\n7,0,1,1\n7,1,2,2\n8,0,1,1\n";
        let err = read_csv(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("cluster 7"), "{err}");
    }

    #[test]
    fn missing_outcomes_counted() {
        let mut s = String::from("id,A,Y,X1\n");
        for r in 0..10 {
            let y = if r == 2 {
                "NA".to_string()
            } else if r == 7 {
                String::new()
            } else {
                r.to_string()
            };
            s.push_str(&format!("{},{},{},{}\n", r % 2, r % 2, y, r));
        }
        let d = read_csv(s.as_bytes(), &schema()).unwrap();
        let observed: usize = d.clusters().iter().map(|b| b.observed().iter().filter(|o| **o).count()).sum();
        assert_eq!(observed, 8);
    }

    #[test]
    fn rejects_bad_cells() {
        let bad_num = "id,A,Y,X1\n1,0,abc,1\n2,1,1,1\n";
        match read_csv(bad_num.as_bytes(), &schema()).unwrap_err() {
            Error::Parse { row, .. } => assert_eq!(row, 1),
            e => panic!("unexpected {e}"),
        }
        let bad_arm = "id,A,Y,X1\n1,2,1,1\n2,1,1,1\n";
        assert!(matches!(
            read_csv(bad_arm.as_bytes(), &schema()).unwrap_err(),
            Error::Validation(_)
        ));
        let missing_cov = "id,A,Y,X1\n1,0,1,\n2,1,1,1\n";
        assert!(matches!(
            read_csv(missing_cov.as_bytes(), &schema()).unwrap_err(),
            Error::Validation(_)
        ));
        let single_arm = "id,A,Y,X1\n1,0,1,1\n2,0,1,1\n";
        assert!(matches!(
            read_csv(single_arm.as_bytes(), &schema()).unwrap_err(),
            Error::Validation(_)
        ));
    }

    #[test]
    fn cluster_means_and_modes() {
        let d = read_csv(SIMPLE.as_bytes(), &schema()).unwrap();
        let d = d.append_cluster_means(&["X1"]).unwrap();
        let k = d.covariate_index("mean_X1").unwrap();
        assert!(d.clusters()[0].covariates.column(k).iter().all(|&v| v == 2.0));

        let two = "id,A,Y,X1\n1,0,1,1\n1,0,1,1\n2,1,1,5\n2,1,1,7\n";
        let d2 = read_csv(two.as_bytes(), &schema()).unwrap();
        // X1 takes values {1,5,7}: three levels, treated as continuous
        assert!(!d2.is_categorical("X1").unwrap());
        let d2 = d2.append_cluster_means(&["X1"]).unwrap();
        let k = d2.covariate_index("mean_X1").unwrap();
        let col: Vec<f64> = d2
            .clusters()
            .iter()
            .flat_map(|b| b.covariates.column(k).iter().copied().collect::<Vec<_>>())
            .collect();
        assert_eq!(col, vec![1.0, 1.0, 6.0, 6.0]);

        let cat = "id,A,Y,X1\n1,0,1,0\n1,0,1,0\n1,0,1,1\n2,1,1,1\n2,1,1,0\n";
        let d3 = read_csv(cat.as_bytes(), &schema()).unwrap();
        assert!(d3.is_categorical("X1").unwrap());
        let d3 = d3.append_cluster_means(&["X1"]).unwrap();
        let k = d3.covariate_index("mean_X1").unwrap();
        assert_eq!(d3.clusters()[0].covariates[(0, k)], 0.0);
        // tie (one 1, one 0) goes to the smaller value
        assert_eq!(d3.clusters()[1].covariates[(0, k)], 0.0);

        assert!(matches!(
            d3.append_cluster_means(&["nope"]).unwrap_err(),
            Error::UnknownCovariate(_)
        ));
    }

    #[test]
    fn cluster_means_idempotent() {
        let d = read_csv(SIMPLE.as_bytes(), &schema()).unwrap();
        let once = d.append_cluster_means(&["X1"]).unwrap();
        let twice = once.append_cluster_means(&["X1"]).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn design_matrix_filters() {
        let csv = "id,A,Y,X1\n1,0,1,1\n1,0,NA,2\n2,1,3,3\n2,1,4,4\n";
        let d = read_csv(csv.as_bytes(), &schema()).unwrap();
        let spec = ModelSpec::parse("X1").unwrap();
        let (x, rows) = design_matrix(&d, &spec, None, false).unwrap();
        assert_eq!((x.nrows(), x.ncols()), (4, 2));
        assert!(x.column(0).iter().all(|&v| v == 1.0));
        let (x, _) = design_matrix(&d, &spec, None, true).unwrap();
        assert_eq!(x.nrows(), 3);
        let (x, rows1) = design_matrix(&d, &spec, Some(1), false).unwrap();
        assert_eq!(x.nrows(), 2);
        assert!(rows1.iter().all(|r| r.cluster == 1));
        assert_eq!(rows[1], RowRef { cluster: 0, subject: 1 });

        let only_missing = "id,A,Y,X1\n1,0,NA,1\n2,1,3,3\n";
        let d = read_csv(only_missing.as_bytes(), &schema()).unwrap();
        assert!(matches!(
            design_matrix(&d, &spec, Some(0), true).unwrap_err(),
            Error::EmptySelection(_)
        ));
    }

    #[test]
    fn term_parsing() {
        let spec = ModelSpec::parse("X1, A ,A:X1,X2:A").unwrap();
        assert_eq!(
            spec.terms(),
            &[
                Term::Covariate("X1".into()),
                Term::Arm,
                Term::ArmInteraction("X1".into()),
                Term::ArmInteraction("X2".into())
            ]
        );
        assert!(ModelSpec::parse("X1,X1").is_err());
        assert!(ModelSpec::parse("X1:X2").is_err());
        assert_eq!(spec.to_string(), "X1,A,A:X1,A:X2");
    }

    #[test]
    fn interaction_rows_use_requested_arm() {
        let d = read_csv(SIMPLE.as_bytes(), &schema()).unwrap();
        let r = ModelSpec::parse("A,A:X1").unwrap().resolve(&d).unwrap();
        let mut row = [0.0; 3];
        r.fill_row(&d.clusters()[0], 2, 1, &mut row);
        assert_eq!(row, [1.0, 1.0, 3.0]);
        r.fill_row(&d.clusters()[0], 2, 0, &mut row);
        assert_eq!(row, [1.0, 0.0, 0.0]);
    }
}
