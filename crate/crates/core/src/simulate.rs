//! Data generators for cluster-randomized trials with covariate interference
//! and outcome missingness, and a Monte Carlo harness that summarises bias,
//! standard errors and coverage of the estimators.
//!
//! A [`Scenario`] is a set of covariate laws plus two linear predictors over
//! dataset terms: one for the outcome mean and one for logit P(outcome
//! missing). Cluster summaries (`mean_<name>`) are computed before either
//! predictor is evaluated, so both may use them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::correlation::CorrelationKind;
use crate::dataset::{
    ClusterBlock, ModelSpec, ResolvedSpec, Term, TrialDataset, CLUSTER_MEAN_PREFIX,
};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, EstimatorKind, Problem, VarianceMethod, WeightPlacement};
use crate::glm::{expit, select_outcome, select_propensity, StepDirection};

/// Largest tolerated share of failed replicates per summary row.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Distribution of one subject-level covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum CovariateLaw {
    Normal { mean: f64, variance: f64 },
    Bernoulli { p: f64 },
    /// Levels 0, 1, …, k−1 drawn with the given probabilities.
    Categorical { probs: Vec<f64> },
}

impl CovariateLaw {
    pub fn expectation(&self) -> f64 {
        match self {
            CovariateLaw::Normal { mean, .. } => *mean,
            CovariateLaw::Bernoulli { p } => *p,
            CovariateLaw::Categorical { probs } => {
                probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
            }
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self, CovariateLaw::Categorical { .. })
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = match self {
            CovariateLaw::Normal { mean, variance } => mean.is_finite() && *variance >= 0.0 && variance.is_finite(),
            CovariateLaw::Bernoulli { p } => (0.0..=1.0).contains(p),
            CovariateLaw::Categorical { probs } => {
                !probs.is_empty()
                    && probs.iter().all(|p| *p >= 0.0 && p.is_finite())
                    && (probs.iter().sum::<f64>() - 1.0).abs() < 1e-9
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid law for covariate '{name}': {self:?}")))
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            CovariateLaw::Normal { mean, variance } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + variance.sqrt() * z
            }
            CovariateLaw::Bernoulli { p } => f64::from(u8::from(rng.random::<f64>() < *p)),
            CovariateLaw::Categorical { probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return k as f64;
                    }
                }
                (probs.len() - 1) as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub law: CovariateLaw,
}

impl CovariateSpec {
    pub fn new(name: &str, law: CovariateLaw) -> Self {
        Self { name: name.to_string(), law }
    }
}

/// intercept + Σ coefficient · term, with terms written as in model lists
/// (`A`, `X1`, `mean_X1`, `A:X1`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub intercept: f64,
    #[serde(default)]
    pub terms: BTreeMap<String, f64>,
}

impl LinearPredictor {
    pub fn new(intercept: f64, terms: &[(&str, f64)]) -> Self {
        Self {
            intercept,
            terms: terms.iter().map(|(t, c)| (t.to_string(), *c)).collect(),
        }
    }

    fn parsed_terms(&self) -> Result<Vec<(Term, f64)>> {
        self.terms
            .iter()
            .map(|(t, c)| Ok((Term::from_str(t)?, *c)))
            .collect()
    }

    fn resolve(&self, data: &TrialDataset) -> Result<(ResolvedSpec, Vec<f64>)> {
        let parsed = self.parsed_terms()?;
        let spec = ModelSpec::new(parsed.iter().map(|(t, _)| t.clone()).collect())?;
        let coefs = std::iter::once(self.intercept)
            .chain(parsed.iter().map(|(_, c)| *c))
            .collect();
        Ok((spec.resolve(data)?, coefs))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Data-generating process for one simulated trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub clusters: usize,
    /// Cluster sizes, each drawn with equal probability.
    pub size_menu: Vec<usize>,
    #[serde(default = "default_p_treat")]
    pub p_treat: f64,
    pub covariates: Vec<CovariateSpec>,
    /// Covariates whose cluster mean (mode when categorical) is appended as `mean_<name>`.
    #[serde(default)]
    pub cluster_summaries: Vec<String>,
    pub outcome: LinearPredictor,
    /// logit P(outcome missing); absent means every outcome is observed.
    #[serde(default)]
    pub missingness: Option<LinearPredictor>,
    pub cluster_error_variance: f64,
    pub individual_error_variance: f64,
}

fn default_p_treat() -> f64 {
    0.5
}

/// One simulated trial and the same trial before outcomes were masked.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTrial {
    pub data: TrialDataset,
    pub complete: TrialDataset,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(Error::Config("a scenario needs at least two clusters".into()));
        }
        if self.size_menu.is_empty() || self.size_menu.contains(&0) {
            return Err(Error::Config("size menu must list positive cluster sizes".into()));
        }
        if !(self.p_treat > 0.0 && self.p_treat < 1.0) {
            return Err(Error::Config(format!("p_treat must lie in (0, 1), got {}", self.p_treat)));
        }
        for v in [self.cluster_error_variance, self.individual_error_variance] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("error variances must be finite and non-negative, got {v}")));
            }
        }
        for c in &self.covariates {
            c.law.validate(&c.name)?;
        }
        for s in &self.cluster_summaries {
            self.law(s)?;
        }
        for pred in std::iter::once(&self.outcome).chain(self.missingness.as_ref()) {
            for (term, _) in pred.parsed_terms()? {
                match term {
                    Term::Arm => {}
                    Term::Covariate(c) | Term::ArmInteraction(c) => {
                        self.expectation(&c)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn law(&self, name: &str) -> Result<&CovariateLaw> {
        self.covariates
            .iter()
            .find(|c| c.name == name)
            .map(|c| &c.law)
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    }

    /// Expected value of a covariate or of a declared cluster summary, which
    /// is taken to share its covariate's expectation.
    fn expectation(&self, name: &str) -> Result<f64> {
        if let Some(base) = name.strip_prefix(CLUSTER_MEAN_PREFIX) {
            if self.cluster_summaries.iter().any(|s| s == base) {
                return Ok(self.law(base)?.expectation());
            }
        }
        Ok(self.law(name)?.expectation())
    }

    /// E[Y | A=1] − E[Y | A=0] implied by the outcome predictor.
    pub fn marginal_effect(&self) -> Result<f64> {
        let mut effect = 0.0;
        for (term, coef) in self.outcome.parsed_terms()? {
            match term {
                Term::Arm => effect += coef,
                Term::ArmInteraction(c) => effect += coef * self.expectation(&c)?,
                Term::Covariate(_) => {}
            }
        }
        Ok(effect)
    }

    pub fn generate(&self, seed: u64) -> Result<GeneratedTrial> {
        self.generate_with(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn generate_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<GeneratedTrial> {
        self.validate()?;
        let names: Vec<String> = self.covariates.iter().map(|c| c.name.clone()).collect();
        let mut blocks = Vec::with_capacity(self.clusters);
        for i in 0..self.clusters {
            let n = self.size_menu[rng.random_range(0..self.size_menu.len())];
            let arm = u8::from(rng.random::<f64>() < self.p_treat);
            let mut x = DMatrix::zeros(n, names.len());
            for j in 0..n {
                for (k, c) in self.covariates.iter().enumerate() {
                    x[(j, k)] = c.law.sample(rng);
                }
            }
            blocks.push(ClusterBlock::new(format!("{}", i + 1), arm, vec![Some(0.0); n], x)?);
        }
        let mut base = TrialDataset::new(blocks, names)
            .map_err(|e| Error::Simulation(format!("generated trial rejected: {e}")))?;
        for c in &self.covariates {
            base.set_categorical(&c.name, c.law.is_categorical())?;
        }
        let base = base.append_cluster_means(&self.cluster_summaries)?;
        let (outcome, beta_o) = self.outcome.resolve(&base)?;
        let missing = self.missingness.as_ref().map(|m| m.resolve(&base)).transpose()?;
        let sd_c = self.cluster_error_variance.sqrt();
        let sd_i = self.individual_error_variance.sqrt();
        let mut row = vec![0.0; beta_o.len()];
        let mut complete = Vec::with_capacity(self.clusters);
        let mut masked = Vec::with_capacity(self.clusters);
        for block in base.clusters() {
            let zc: f64 = StandardNormal.sample(rng);
            let u = sd_c * zc;
            let mut y = Vec::with_capacity(block.size());
            let mut y_obs = Vec::with_capacity(block.size());
            for j in 0..block.size() {
                outcome.fill_row(block, j, block.arm, &mut row);
                let zi: f64 = StandardNormal.sample(rng);
                let value = dot(&row, &beta_o) + u + sd_i * zi;
                let is_missing = match &missing {
                    Some((spec, beta_m)) => {
                        let mut mrow = vec![0.0; beta_m.len()];
                        spec.fill_row(block, j, block.arm, &mut mrow);
                        rng.random::<f64>() < expit(dot(&mrow, beta_m))
                    }
                    None => false,
                };
                y.push(Some(value));
                y_obs.push((!is_missing).then_some(value));
            }
            complete.push(ClusterBlock::new(block.id.clone(), block.arm, y, block.covariates.clone())?);
            masked.push(ClusterBlock::new(block.id.clone(), block.arm, y_obs, block.covariates.clone())?);
        }
        let finish = |blocks: Vec<ClusterBlock>| -> Result<TrialDataset> {
            let mut d = TrialDataset::new(blocks, base.covariate_names().to_vec())?;
            for name in base.covariate_names() {
                d.set_categorical(name, base.is_categorical(name)?)?;
            }
            Ok(d)
        };
        Ok(GeneratedTrial {
            data: finish(masked)?,
            complete: finish(complete)?,
        })
    }
}

fn noise_covariates() -> Vec<CovariateSpec> {
    (1..=3)
        .map(|k| {
            CovariateSpec::new(
                &format!("X{k}"),
                CovariateLaw::Normal { mean: k as f64, variance: 5.0 },
            )
        })
        .collect()
}

/// One covariate X1 acting on both outcome and missingness through itself,
/// its cluster mean and its interaction with the arm; X2 and X3 are noise.
/// `outcome` and `missingness` list (intercept, A, X1, mean_X1, A:X1).
pub fn interference_scenario(
    clusters: usize,
    size_menu: &[usize],
    outcome: [f64; 5],
    missingness: Option<[f64; 5]>,
    cluster_error_variance: f64,
    individual_error_variance: f64,
) -> Scenario {
    let predictor = |b: [f64; 5]| {
        LinearPredictor::new(b[0], &[("A", b[1]), ("X1", b[2]), ("mean_X1", b[3]), ("A:X1", b[4])])
    };
    Scenario {
        name: "interference".into(),
        clusters,
        size_menu: size_menu.to_vec(),
        p_treat: 0.5,
        covariates: noise_covariates(),
        cluster_summaries: vec!["X1".into(), "X2".into(), "X3".into()],
        outcome: predictor(outcome),
        missingness: missingness.map(predictor),
        cluster_error_variance,
        individual_error_variance,
    }
}

/// Community-trial scenario with employment, marital status, age,
/// religiosity, an alcohol-use score, HIV knowledge and condom knowledge,
/// arm interactions and cluster-level interference, plus noise X1..X3.
pub fn community_scenario(clusters: usize, size_menu: &[usize]) -> Scenario {
    let normal = |mean, variance| CovariateLaw::Normal { mean, variance };
    let mut covariates = vec![
        CovariateSpec::new("EMP", CovariateLaw::Bernoulli { p: 0.25 }),
        CovariateSpec::new("MARI", CovariateLaw::Bernoulli { p: 0.23 }),
        CovariateSpec::new("AGE", normal(27.0, 7.0)),
        CovariateSpec::new("REL", normal(0.0, 0.8)),
        CovariateSpec::new(
            "CAGE",
            CovariateLaw::Categorical { probs: vec![0.3, 0.1, 0.1, 0.2, 0.3] },
        ),
        CovariateSpec::new("HIV", normal(14.0, 4.0)),
        CovariateSpec::new("CDM", normal(3.0, 1.0)),
    ];
    covariates.extend(noise_covariates());
    Scenario {
        name: "community".into(),
        clusters,
        size_menu: size_menu.to_vec(),
        p_treat: 0.5,
        covariates,
        cluster_summaries: ["AGE", "CDM", "REL", "HIV", "CAGE"].iter().map(|s| s.to_string()).collect(),
        outcome: LinearPredictor::new(
            60.0,
            &[
                ("A", 40.0),
                ("EMP", -9.0),
                ("MARI", -8.0),
                ("CDM", 1.0),
                ("REL", 5.0),
                ("A:AGE", -2.0),
                ("A:EMP", 8.5),
                ("A:MARI", 3.5),
                ("A:HIV", 1.5),
                ("A:CAGE", -2.0),
                ("A:REL", 2.0),
                ("mean_AGE", -0.5),
                ("mean_CDM", -7.0),
                ("mean_REL", -5.0),
                ("mean_HIV", 1.0),
            ],
        ),
        missingness: Some(LinearPredictor::new(
            -3.0,
            &[
                ("A", 2.0),
                ("AGE", 0.01),
                ("HIV", -0.1),
                ("A:AGE", -0.1),
                ("A:HIV", -0.2),
                ("mean_AGE", 0.02),
                ("mean_CDM", 0.2),
                ("mean_CAGE", 0.2),
            ],
        )),
        cluster_error_variance: 5.0,
        individual_error_variance: 4.0,
    }
}

/// How a nuisance model's terms are chosen in each replicate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecChoice {
    /// Comma-separated term list used as is.
    Fixed(String),
    /// Comma-separated candidate list searched by stepwise AIC.
    Stepwise(String),
}

impl SpecChoice {
    fn terms(list: &str) -> Result<Vec<Term>> {
        Ok(ModelSpec::parse(list)?.terms().to_vec())
    }
}

/// One estimator fitted in every replicate under each working correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimator {
    pub label: String,
    pub kind: EstimatorKind,
    #[serde(default)]
    pub placement: WeightPlacement,
    #[serde(default)]
    pub ps: Option<SpecChoice>,
    /// Same choice applied to each arm's outcome model.
    #[serde(default)]
    pub om: Option<SpecChoice>,
    /// Fit on the trial before outcomes were masked.
    #[serde(default)]
    pub complete_data: bool,
}

impl McEstimator {
    pub fn new(label: &str, kind: EstimatorKind) -> Self {
        Self {
            label: label.to_string(),
            kind,
            placement: WeightPlacement::VinvW,
            ps: None,
            om: None,
            complete_data: false,
        }
    }

    pub fn with_ps(mut self, choice: SpecChoice) -> Self {
        self.ps = Some(choice);
        self
    }

    pub fn with_om(mut self, choice: SpecChoice) -> Self {
        self.om = Some(choice);
        self
    }

    pub fn with_placement(mut self, placement: WeightPlacement) -> Self {
        self.placement = placement;
        self
    }

    pub fn on_complete_data(mut self) -> Self {
        self.complete_data = true;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.kind.uses_propensity() && self.ps.is_none() {
            return Err(Error::Config(format!("estimator '{}' needs a propensity model", self.label)));
        }
        if self.kind.uses_outcome_model() && self.om.is_none() {
            return Err(Error::Config(format!("estimator '{}' needs an outcome model", self.label)));
        }
        for choice in self.ps.iter().chain(&self.om) {
            match choice {
                SpecChoice::Fixed(s) | SpecChoice::Stepwise(s) => {
                    SpecChoice::terms(s)?;
                }
            }
        }
        Ok(())
    }
}

fn default_correlations() -> Vec<CorrelationKind> {
    vec![CorrelationKind::Independence, CorrelationKind::Exchangeable]
}

/// A scenario with the estimators to evaluate on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub scenario: Scenario,
    pub estimators: Vec<McEstimator>,
    #[serde(default = "default_correlations")]
    pub correlations: Vec<CorrelationKind>,
}

impl Study {
    pub fn new(scenario: Scenario, estimators: Vec<McEstimator>) -> Self {
        Self {
            scenario,
            estimators,
            correlations: default_correlations(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let study: Study = toml::from_str(text).map_err(|e| Error::Config(format!("scenario file: {e}")))?;
        study.validate()?;
        Ok(study)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("scenario serialization: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.correlations.is_empty() {
            return Err(Error::Config("at least one working correlation is required".into()));
        }
        let mut labels = std::collections::HashSet::new();
        for e in &self.estimators {
            e.validate()?;
            if !labels.insert(e.label.as_str()) {
                return Err(Error::Config(format!("duplicate estimator label '{}'", e.label)));
            }
        }
        Ok(())
    }
}

/// Level of a nuisance model in the double-robustness grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridLevel {
    /// Correct functional form.
    True,
    /// Wrong covariate.
    Miss,
    /// Correct covariates without the arm interaction (propensity only).
    None,
}

impl FromStr for GridLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "true" => Ok(GridLevel::True),
            "miss" => Ok(GridLevel::Miss),
            "none" => Ok(GridLevel::None),
            other => Err(Error::Config(format!("unknown grid level '{other}'"))),
        }
    }
}

impl fmt::Display for GridLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridLevel::True => "TRUE",
            GridLevel::Miss => "MISS",
            GridLevel::None => "NONE",
        })
    }
}

fn grid_om(level: GridLevel) -> Result<SpecChoice> {
    match level {
        GridLevel::True => Ok(SpecChoice::Fixed("X1,mean_X1".into())),
        GridLevel::Miss => Ok(SpecChoice::Fixed("X2".into())),
        GridLevel::None => Err(Error::Config("the outcome-model grid accepts only true and miss".into())),
    }
}

fn grid_ps(level: GridLevel) -> SpecChoice {
    SpecChoice::Fixed(
        match level {
            GridLevel::True => "A,X1,mean_X1,A:X1",
            GridLevel::Miss => "A,X2",
            GridLevel::None => "A,X1,mean_X1",
        }
        .into(),
    )
}

/// One DR estimator per (outcome level, propensity level) cell.
pub fn dr_grid(om: &[GridLevel], ps: &[GridLevel]) -> Result<Vec<McEstimator>> {
    let mut out = Vec::new();
    for &o in om {
        for &p in ps {
            out.push(
                McEstimator::new(&format!("DR.OM.{o}.PS.{p}"), EstimatorKind::Dr)
                    .with_om(grid_om(o)?)
                    .with_ps(grid_ps(p)),
            );
        }
    }
    Ok(out)
}

/// Parses `om=true,miss ps=true,miss,none`.
pub fn parse_grid(text: &str) -> Result<(Vec<GridLevel>, Vec<GridLevel>)> {
    let mut om = None;
    let mut ps = None;
    for part in text.split_whitespace() {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid entry '{part}' is not key=levels")))?;
        let levels = values
            .split(',')
            .filter(|s| !s.is_empty())
            .map(GridLevel::from_str)
            .collect::<Result<Vec<_>>>()?;
        match key.to_ascii_lowercase().as_str() {
            "om" => om = Some(levels),
            "ps" => ps = Some(levels),
            other => return Err(Error::Config(format!("unknown grid key '{other}'"))),
        }
    }
    match (om, ps) {
        (Some(o), Some(p)) if !o.is_empty() && !p.is_empty() => Ok((o, p)),
        _ => Err(Error::Config("grid needs non-empty om= and ps= lists".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleSize {
    Small,
    #[default]
    Large,
}

impl FromStr for SampleSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(SampleSize::Small),
            "large" => Ok(SampleSize::Large),
            other => Err(Error::Config(format!("unknown sample size '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrelationLevel {
    #[default]
    Low,
    High,
}

impl FromStr for CorrelationLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(CorrelationLevel::Low),
            "high" => Ok(CorrelationLevel::High),
            other => Err(Error::Config(format!("unknown correlation level '{other}'"))),
        }
    }
}

pub const BUILTIN_NAMES: [&str; 3] = ["table3", "table4", "table5"];

fn default_interference(sample: SampleSize, correlation: CorrelationLevel) -> Scenario {
    let (m, menu): (usize, &[usize]) = match sample {
        SampleSize::Small => (10, &[10, 20, 30]),
        SampleSize::Large => (100, &[90, 100, 110]),
    };
    let cluster_var = match correlation {
        CorrelationLevel::Low => 0.05,
        CorrelationLevel::High => 0.25,
    };
    interference_scenario(m, menu, [1.0; 5], Some([-3.0, 0.5, 0.5, 0.5, 0.5]), cluster_var, 1.0)
}

fn stepwise_study(scenario: Scenario, om_candidates: &str) -> Study {
    let ps_candidates = format!("A,{om_candidates}");
    Study::new(
        scenario,
        vec![
            McEstimator::new("GEE", EstimatorKind::Gee),
            McEstimator::new("IPW", EstimatorKind::Ipw).with_ps(SpecChoice::Stepwise(ps_candidates.clone())),
            McEstimator::new("AUG", EstimatorKind::Aug).with_om(SpecChoice::Stepwise(om_candidates.into())),
            McEstimator::new("DR", EstimatorKind::Dr)
                .with_ps(SpecChoice::Stepwise(ps_candidates))
                .with_om(SpecChoice::Stepwise(om_candidates.into())),
        ],
    )
}

/// Named studies:
///
/// * `table3`: the interference scenario with the double-robustness grid of
///   fixed nuisance models, plus GEE on the unmasked data.
/// * `table4`: the same scenario with stepwise-selected nuisance models.
/// * `table5`: the community scenario with stepwise-selected nuisance
///   models; `Large` is 50 clusters of 20 or 30 subjects.
///
/// `grid` replaces the default DR cells of `table3`.
pub fn builtin_study(
    name: &str,
    sample: SampleSize,
    correlation: CorrelationLevel,
    grid: Option<(&[GridLevel], &[GridLevel])>,
) -> Result<Study> {
    let study = match name {
        "table3" => {
            let mut estimators = vec![
                McEstimator::new("GEE.NO_MISSING", EstimatorKind::Gee).on_complete_data(),
                McEstimator::new("GEE", EstimatorKind::Gee),
                McEstimator::new("IPW.PS.TRUE", EstimatorKind::Ipw).with_ps(grid_ps(GridLevel::True)),
                McEstimator::new("AUG.OM.TRUE", EstimatorKind::Aug).with_om(grid_om(GridLevel::True)?),
            ];
            match grid {
                Some((om, ps)) => estimators.extend(dr_grid(om, ps)?),
                None => {
                    use GridLevel::{Miss, None as NoInt, True};
                    for (o, p) in [(Miss, True), (True, Miss), (True, True), (True, NoInt)] {
                        estimators.extend(dr_grid(&[o], &[p])?);
                    }
                }
            }
            Study::new(default_interference(sample, correlation), estimators)
        }
        "table4" => stepwise_study(
            default_interference(sample, correlation),
            "X1,X2,X3,mean_X1,mean_X2,mean_X3",
        ),
        "table5" => {
            let scenario = match sample {
                SampleSize::Small => community_scenario(10, &[10, 20, 30]),
                SampleSize::Large => community_scenario(50, &[20, 30, 30]),
            };
            stepwise_study(scenario, "EMP,MARI,AGE,REL,CAGE,HIV,CDM,X1,X2,X3")
        }
        other => {
            return Err(Error::Config(format!(
                "unknown built-in study '{other}' (expected one of {})",
                BUILTIN_NAMES.join(", ")
            )))
        }
    };
    if grid.is_some() && name != "table3" {
        return Err(Error::Config("a grid applies only to the table3 study".into()));
    }
    let mut study = study;
    study.scenario.name = name.to_string();
    Ok(study)
}

/// One-way ANOVA intra-cluster correlation of observed outcomes after
/// removing arm means; `None` when fewer than two clusters have outcomes or
/// no cluster has two.
pub fn empirical_icc(data: &TrialDataset) -> Option<f64> {
    let mut arm_sum = [0.0; 2];
    let mut arm_n = [0usize; 2];
    for b in data.clusters() {
        for y in b.outcomes.iter().flatten() {
            arm_sum[b.arm as usize] += y;
            arm_n[b.arm as usize] += 1;
        }
    }
    let arm_mean = [0, 1].map(|a| if arm_n[a] > 0 { arm_sum[a] / arm_n[a] as f64 } else { 0.0 });
    let groups: Vec<Vec<f64>> = data
        .clusters()
        .iter()
        .map(|b| b.outcomes.iter().flatten().map(|y| y - arm_mean[b.arm as usize]).collect::<Vec<f64>>())
        .filter(|g| !g.is_empty())
        .collect();
    let k = groups.len();
    let n: usize = groups.iter().map(Vec::len).sum();
    if k < 2 || n <= k {
        return None;
    }
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    let mut sum_sq_sizes = 0.0;
    for g in &groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ssb += g.len() as f64 * (m - grand).powi(2);
        ssw += g.iter().map(|y| (y - m).powi(2)).sum::<f64>();
        sum_sq_sizes += (g.len() * g.len()) as f64;
    }
    let msb = ssb / (k - 1) as f64;
    let msw = ssw / (n - k) as f64;
    let n0 = (n as f64 - sum_sq_sizes / n as f64) / (k - 1) as f64;
    let denom = msb + (n0 - 1.0) * msw;
    (denom > 0.0).then(|| (msb - msw) / denom)
}

/// Outcome of one estimator under one working correlation in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub scenario: String,
    pub replicate: usize,
    pub estimator: String,
    pub correlation: CorrelationKind,
    pub true_effect: f64,
    pub estimate: Option<f64>,
    pub se_robust: Option<f64>,
    pub se_adjusted: Option<f64>,
    pub se_fay: Option<f64>,
    pub missing_fraction: Option<f64>,
    pub icc: Option<f64>,
    /// Set when the replicate failed; such records are excluded from summaries.
    pub error: Option<String>,
}

impl ReplicateRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none() && self.estimate.is_some()
    }
}

pub fn write_records<W: Write>(writer: W, records: &[ReplicateRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(reader: R) -> Result<Vec<ReplicateRecord>> {
    let mut rd = csv::Reader::from_reader(reader);
    let headers = rd.headers()?.clone();
    let expected = RECORD_COLUMNS;
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Validation(format!(
            "estimates file columns {:?} do not match the expected {:?}",
            headers.iter().collect::<Vec<_>>(),
            expected
        )));
    }
    rd.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Parse {
                row: i + 2,
                column: String::new(),
                message: e.to_string(),
            })
        })
        .collect()
}

const RECORD_COLUMNS: [&str; 12] = [
    "scenario",
    "replicate",
    "estimator",
    "correlation",
    "true_effect",
    "estimate",
    "se_robust",
    "se_adjusted",
    "se_fay",
    "missing_fraction",
    "icc",
    "error",
];

/// Summary of one estimator under one working correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub correlation: CorrelationKind,
    pub true_effect: f64,
    /// Successful replicates.
    pub replicates: usize,
    pub failures: usize,
    pub bias: Option<f64>,
    /// Standard deviation of the estimates; needs two replicates.
    pub empirical_se: Option<f64>,
    /// Mean nuisance-adjusted SE.
    pub mean_robust_se: Option<f64>,
    pub mean_fay_se: Option<f64>,
    /// Mean sandwich SE ignoring nuisance estimation.
    pub mean_unadjusted_se: Option<f64>,
    pub coverage_robust: Option<f64>,
    pub coverage_fay: Option<f64>,
    pub mean_missing_fraction: f64,
    pub mean_icc: Option<f64>,
}

impl SummaryRow {
    pub fn failure_rate(&self) -> f64 {
        let total = self.replicates + self.failures;
        if total == 0 {
            0.0
        } else {
            self.failures as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub scenario: String,
    pub level: f64,
    pub rows: Vec<SummaryRow>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn coverage(pairs: &[(f64, f64)], truth: f64, z: f64) -> Option<f64> {
    mean(
        &pairs
            .iter()
            .map(|(est, se)| f64::from(u8::from((est - truth).abs() <= z * se)))
            .collect::<Vec<_>>(),
    )
}

/// Two-sided normal critical value for confidence `level`.
pub fn critical_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let n = Normal::new(0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    Ok(n.inverse_cdf(0.5 + level / 2.0))
}

/// Groups records by (estimator, correlation) in order of first appearance.
pub fn summarize(scenario: &str, records: &[ReplicateRecord], level: f64) -> Result<McSummary> {
    let z = critical_value(level)?;
    let mut order: Vec<(String, CorrelationKind)> = Vec::new();
    let mut groups: HashMap<(String, CorrelationKind), Vec<&ReplicateRecord>> = HashMap::new();
    for r in records {
        let key = (r.estimator.clone(), r.correlation);
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    let rows = order
        .into_iter()
        .map(|key| {
            let mut group = groups.remove(&key).unwrap_or_default();
            group.sort_by_key(|r| r.replicate);
            let truth = group[0].true_effect;
            let ok: Vec<&ReplicateRecord> = group.iter().copied().filter(|r| r.succeeded()).collect();
            let estimates: Vec<f64> = ok.iter().filter_map(|r| r.estimate).collect();
            let pick = |f: fn(&ReplicateRecord) -> Option<f64>| -> Vec<(f64, f64)> {
                ok.iter()
                    .filter_map(|r| match (r.estimate, f(r)) {
                        (Some(e), Some(s)) if s.is_finite() => Some((e, s)),
                        _ => None,
                    })
                    .collect()
            };
            let adjusted = pick(|r| r.se_adjusted);
            let fay = pick(|r| r.se_fay);
            let plain = pick(|r| r.se_robust);
            let bias = mean(&estimates).map(|m| m - truth);
            let empirical_se = (estimates.len() >= 2).then(|| {
                let m = estimates.iter().sum::<f64>() / estimates.len() as f64;
                let ss: f64 = estimates.iter().map(|e| (e - m).powi(2)).sum();
                (ss / (estimates.len() - 1) as f64).sqrt()
            });
            let ses = |p: &[(f64, f64)]| mean(&p.iter().map(|x| x.1).collect::<Vec<_>>());
            let iccs: Vec<f64> = group.iter().filter_map(|r| r.icc).collect();
            let missing: Vec<f64> = group.iter().filter_map(|r| r.missing_fraction).collect();
            SummaryRow {
                estimator: key.0,
                correlation: key.1,
                true_effect: truth,
                replicates: ok.len(),
                failures: group.len() - ok.len(),
                bias,
                empirical_se,
                mean_robust_se: ses(&adjusted),
                mean_fay_se: ses(&fay),
                mean_unadjusted_se: ses(&plain),
                coverage_robust: coverage(&adjusted, truth, z),
                coverage_fay: coverage(&fay, truth, z),
                mean_missing_fraction: mean(&missing).unwrap_or(0.0),
                mean_icc: mean(&iccs),
            }
        })
        .collect();
    Ok(McSummary {
        scenario: scenario.to_string(),
        level,
        rows,
    })
}

impl McSummary {
    pub fn row(&self, estimator: &str, correlation: CorrelationKind) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.correlation == correlation)
    }

    /// Errors when any row lost more than [`MAX_FAILURE_RATE`] of its replicates.
    pub fn check_failures(&self) -> Result<()> {
        let bad: Vec<String> = self
            .rows
            .iter()
            .filter(|r| r.failure_rate() > MAX_FAILURE_RATE)
            .map(|r| format!("{}-{} ({} of {})", r.estimator, r.correlation.suffix(), r.failures, r.failures + r.replicates))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Simulation(format!("too many failed replicates: {}", bad.join(", "))))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TableFormat {
    #[default]
    Csv,
    Json,
    Markdown,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            other => Err(Error::Config(format!("unknown table format '{other}'"))),
        }
    }
}

const PIVOT_CORRELATIONS: [CorrelationKind; 2] = [CorrelationKind::Independence, CorrelationKind::Exchangeable];

/// Column order of CSV and markdown tables; each statistic appears once per
/// working correlation with an `-I` or `-E` suffix.
pub fn table_header() -> Vec<String> {
    let mut h = vec!["Estimator".to_string(), "True effect".to_string()];
    for stat in [
        "Bias",
        "Empirical SE",
        "Robust SE",
        "Fay SE",
        "Robust coverage",
        "Fay coverage",
        "Replicates",
    ] {
        for c in PIVOT_CORRELATIONS {
            h.push(format!("{stat}-{}", c.suffix()));
        }
    }
    h.push("Missing fraction".into());
    h.push("ICC".into());
    h
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.digits$}"))
}

fn table_rows(summary: &McSummary) -> Vec<Vec<String>> {
    let mut labels: Vec<&str> = Vec::new();
    for r in &summary.rows {
        if !labels.contains(&r.estimator.as_str()) {
            labels.push(&r.estimator);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let cells: Vec<Option<&SummaryRow>> = PIVOT_CORRELATIONS.iter().map(|&c| summary.row(label, c)).collect();
            let first = summary.rows.iter().find(|r| r.estimator == label).expect("label from rows");
            let mut out = vec![label.to_string(), format!("{:.4}", first.true_effect)];
            let stats: [(fn(&SummaryRow) -> Option<f64>, usize); 6] = [
                (|r| r.bias, 4),
                (|r| r.empirical_se, 4),
                (|r| r.mean_robust_se, 4),
                (|r| r.mean_fay_se, 4),
                (|r| r.coverage_robust, 3),
                (|r| r.coverage_fay, 3),
            ];
            for (f, digits) in stats {
                for cell in &cells {
                    out.push(fmt_opt(cell.and_then(f), digits));
                }
            }
            for cell in &cells {
                out.push(cell.map_or_else(|| "NA".to_string(), |r| r.replicates.to_string()));
            }
            out.push(format!("{:.3}", first.mean_missing_fraction));
            out.push(fmt_opt(first.mean_icc, 3));
            out
        })
        .collect()
}

pub fn summarize_to_table(summary: &McSummary, format: TableFormat) -> Result<String> {
    match format {
        TableFormat::Json => {
            let mut s = serde_json::to_string_pretty(summary).map_err(|e| Error::Config(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(table_header())?;
            for row in table_rows(summary) {
                w.write_record(row)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
        }
        TableFormat::Markdown => {
            let header = table_header();
            let mut s = format!("| {} |\n", header.join(" | "));
            s.push_str(&format!("|{}\n", "---|".repeat(header.len())));
            for row in table_rows(summary) {
                s.push_str(&format!("| {} |\n", row.join(" | ")));
            }
            Ok(s)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McOptions {
    pub replicates: usize,
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
    pub level: f64,
    pub direction: StepDirection,
}

impl McOptions {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            seed,
            jobs: 1,
            level: 0.95,
            direction: StepDirection::Both,
        }
    }

    pub fn with_jobs(mut self, jobs: usize) -> Self {
        self.jobs = jobs;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McRun {
    pub records: Vec<ReplicateRecord>,
    pub summary: McSummary,
}

/// Random stream of replicate `r`: a pure function of (seed, r).
pub fn replicate_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng
}

struct ReplicateFit {
    estimate: f64,
    se_robust: Option<f64>,
    se_adjusted: Option<f64>,
    se_fay: Option<f64>,
}

type SpecCache = HashMap<(bool, Option<u8>, String), ModelSpec>;

fn resolve_choice(
    cache: &mut SpecCache,
    data: &TrialDataset,
    complete: bool,
    arm: Option<u8>,
    choice: &SpecChoice,
    direction: StepDirection,
) -> Result<ModelSpec> {
    match choice {
        SpecChoice::Fixed(list) => ModelSpec::parse(list),
        SpecChoice::Stepwise(list) => {
            let key = (complete, arm, list.clone());
            if let Some(spec) = cache.get(&key) {
                return Ok(spec.clone());
            }
            let candidates = SpecChoice::terms(list)?;
            let spec = match arm {
                None => select_propensity(data, &candidates, direction)?.0,
                Some(a) => select_outcome(data, a, &candidates, direction)?.0,
            };
            cache.insert(key, spec.clone());
            Ok(spec)
        }
    }
}

fn fit_estimator(
    est: &McEstimator,
    data: &TrialDataset,
    complete: bool,
    correlations: &[CorrelationKind],
    cache: &mut SpecCache,
    opts: &McOptions,
) -> Result<Vec<Result<ReplicateFit>>> {
    let mut cfg = EstimatorConfig::new(est.kind).with_placement(est.placement);
    cfg.level = opts.level;
    if let Some(choice) = est.ps.as_ref().filter(|_| est.kind.uses_propensity()) {
        cfg = cfg.with_ps(resolve_choice(cache, data, complete, None, choice, opts.direction)?);
    }
    if let Some(choice) = est.om.as_ref().filter(|_| est.kind.uses_outcome_model()) {
        let s0 = resolve_choice(cache, data, complete, Some(0), choice, opts.direction)?;
        let s1 = resolve_choice(cache, data, complete, Some(1), choice, opts.direction)?;
        cfg = cfg.with_om_pair(s0, s1);
    }
    let nuisances = Problem::new(data, &cfg)?.fit_nuisances()?;
    Ok(correlations
        .iter()
        .map(|&c| {
            let cfg = cfg.clone().with_correlation(c);
            let fit = Problem::new(data, &cfg)?.solve(nuisances.clone())?;
            if !fit.converged {
                return Err(Error::Simulation(format!("did not converge in {} iterations", fit.iterations)));
            }
            Ok(ReplicateFit {
                estimate: fit
                    .marginal_effect
                    .ok_or_else(|| Error::Simulation("mean model lacks an arm effect".into()))?,
                se_robust: fit.effect_se(VarianceMethod::Robust),
                se_adjusted: fit.effect_se(VarianceMethod::NuisanceAdjusted),
                se_fay: fit.effect_se(VarianceMethod::Fay),
            })
        })
        .collect())
}

fn run_replicate(study: &Study, truth: f64, r: usize, opts: &McOptions) -> Vec<ReplicateRecord> {
    let mut rng = replicate_rng(opts.seed, r);
    let generated = study.scenario.generate_with(&mut rng);
    let (missing_fraction, icc) = match &generated {
        Ok(g) => (
            Some(1.0 - g.data.n_observed() as f64 / g.data.n_total() as f64),
            empirical_icc(&g.data),
        ),
        Err(_) => (None, None),
    };
    let mut cache = SpecCache::new();
    let mut out = Vec::with_capacity(study.estimators.len() * study.correlations.len());
    for est in &study.estimators {
        let fits = match &generated {
            Ok(g) => {
                let data = if est.complete_data { &g.complete } else { &g.data };
                fit_estimator(est, data, est.complete_data, &study.correlations, &mut cache, opts)
            }
            Err(e) => Err(Error::Simulation(e.to_string())),
        };
        for (k, &c) in study.correlations.iter().enumerate() {
            let fit = match &fits {
                Ok(v) => v[k].as_ref().map_err(|e| e.to_string()),
                Err(e) => Err(e.to_string()),
            };
            let mut record = ReplicateRecord {
                scenario: study.scenario.name.clone(),
                replicate: r,
                estimator: est.label.clone(),
                correlation: c,
                true_effect: truth,
                estimate: None,
                se_robust: None,
                se_adjusted: None,
                se_fay: None,
                missing_fraction,
                icc,
                error: None,
            };
            match fit {
                Ok(f) => {
                    record.estimate = Some(f.estimate);
                    record.se_robust = f.se_robust;
                    record.se_adjusted = f.se_adjusted;
                    record.se_fay = f.se_fay;
                }
                Err(msg) => record.error = Some(msg),
            }
            out.push(record);
        }
    }
    out
}

/// Generates `replicates` trials and fits every estimator under every
/// working correlation. Failed fits are kept as records with an error and
/// excluded from the summary; see [`McSummary::check_failures`].
pub fn run_mc(study: &Study, opts: &McOptions) -> Result<McRun> {
    study.validate()?;
    if opts.replicates < 1 {
        return Err(Error::Config("at least one replicate is required".into()));
    }
    critical_value(opts.level)?;
    let truth = study.scenario.marginal_effect()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Simulation(format!("thread pool: {e}")))?;
    let per_replicate: Vec<Vec<ReplicateRecord>> = pool.install(|| {
        (0..opts.replicates)
            .into_par_iter()
            .map(|r| run_replicate(study, truth, r, opts))
            .collect()
    });
    let records: Vec<ReplicateRecord> = per_replicate.into_iter().flatten().collect();
    let summary = summarize(&study.scenario.name, &records, opts.level)?;
    Ok(McRun { records, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn record(r: usize, est: f64, se: f64) -> ReplicateRecord {
        ReplicateRecord {
            scenario: "s".into(),
            replicate: r,
            estimator: "E".into(),
            correlation: CorrelationKind::Independence,
            true_effect: 2.0,
            estimate: Some(est),
            se_robust: Some(se),
            se_adjusted: Some(se),
            se_fay: Some(se),
            missing_fraction: Some(0.1),
            icc: Some(0.05),
            error: None,
        }
    }

    #[test]
    fn constant_estimator_has_zero_bias_and_full_coverage() {
        let recs: Vec<_> = (0..10).map(|r| record(r, 2.0, 1.0)).collect();
        let s = summarize("s", &recs, 0.95).unwrap();
        let row = &s.rows[0];
        assert_eq!(row.bias, Some(0.0));
        assert_eq!(row.coverage_robust, Some(1.0));
        assert_eq!(row.empirical_se, Some(0.0));
        assert_eq!(row.replicates, 10);
    }

    #[test]
    fn single_replicate_has_no_empirical_se() {
        let s = summarize("s", &[record(0, 2.5, 1.0)], 0.95).unwrap();
        assert_eq!(s.rows[0].empirical_se, None);
        assert_relative_eq!(s.rows[0].bias.unwrap(), 0.5);
    }

    #[test]
    fn coverage_uses_the_requested_level() {
        // |error| = 1.8 lies inside 1.96·SE but outside 1.645·SE
        let recs = vec![record(0, 3.8, 1.0), record(1, 2.0, 1.0)];
        assert_eq!(summarize("s", &recs, 0.95).unwrap().rows[0].coverage_robust, Some(1.0));
        assert_eq!(summarize("s", &recs, 0.90).unwrap().rows[0].coverage_robust, Some(0.5));
        assert_relative_eq!(critical_value(0.90).unwrap(), 1.6448536269514722, epsilon = 1e-12);
    }

    #[test]
    fn failures_are_excluded_and_counted() {
        let mut recs: Vec<_> = (0..10).map(|r| record(r, 2.0, 1.0)).collect();
        recs[3].error = Some("boom".into());
        recs[3].estimate = Some(100.0);
        let s = summarize("s", &recs, 0.95).unwrap();
        assert_eq!(s.rows[0].replicates, 9);
        assert_eq!(s.rows[0].failures, 1);
        assert_eq!(s.rows[0].bias, Some(0.0));
        assert!(s.check_failures().is_err());
        let ok = summarize("s", &recs[4..], 0.95).unwrap();
        assert!(ok.check_failures().is_ok());
    }

    #[test]
    fn records_round_trip_through_csv() {
        let mut recs: Vec<_> = (0..3).map(|r| record(r, 2.0 + 0.1 * r as f64, 0.3)).collect();
        recs[1].error = Some("singular, \"bread\"".into());
        recs[1].estimate = None;
        recs[2].icc = None;
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        assert_eq!(read_records(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn record_file_with_other_columns_is_rejected() {
        let text = "replicate,estimate\n0,1.0\n";
        assert!(matches!(read_records(text.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_summary_renders_header_only() {
        let s = McSummary { scenario: "s".into(), level: 0.95, rows: vec![] };
        let csv = summarize_to_table(&s, TableFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), 1);
        let md = summarize_to_table(&s, TableFormat::Markdown).unwrap();
        assert_eq!(md.lines().count(), 2);
    }

    #[test]
    fn table_pivots_correlations_into_columns() {
        let mut recs: Vec<_> = (0..4).map(|r| record(r, 2.0 + 0.01 * r as f64, 0.5)).collect();
        recs.extend((0..4).map(|r| ReplicateRecord {
            correlation: CorrelationKind::Exchangeable,
            ..record(r, 1.0, 0.5)
        }));
        let s = summarize("s", &recs, 0.95).unwrap();
        let csv = summarize_to_table(&s, TableFormat::Csv).unwrap();
        let mut rd = csv::Reader::from_reader(csv.as_bytes());
        let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, table_header());
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 1);
        let col = |name: &str| header.iter().position(|h| h == name).unwrap();
        assert_eq!(&rows[0][col("Bias-I")], "0.0150");
        assert_eq!(&rows[0][col("Bias-E")], "-1.0000");
        assert_eq!(&rows[0][col("Robust coverage-E")], "0.000");
    }

    #[test]
    fn markdown_round_trips_through_csv_reader() {
        let recs: Vec<_> = (0..5).map(|r| record(r, 1.9 + 0.05 * r as f64, 0.2)).collect();
        let s = summarize("s", &recs, 0.95).unwrap();
        let csv_text = summarize_to_table(&s, TableFormat::Csv).unwrap();
        let md = summarize_to_table(&s, TableFormat::Markdown).unwrap();
        let stripped: String = md
            .lines()
            .filter(|l| !l.starts_with("|---"))
            .map(|l| format!("{}\n", l.trim().trim_start_matches('|').trim_end_matches('|')))
            .collect();
        let parse = |text: &str, delim: u8| -> Vec<Vec<String>> {
            csv::ReaderBuilder::new()
                .delimiter(delim)
                .has_headers(false)
                .trim(csv::Trim::All)
                .from_reader(text.as_bytes())
                .records()
                .map(|r| r.unwrap().iter().map(String::from).collect())
                .collect()
        };
        assert_eq!(parse(&stripped, b'|'), parse(&csv_text, b','));
    }

    #[test]
    fn interference_marginal_effect() {
        let s = default_interference(SampleSize::Small, CorrelationLevel::Low);
        assert_relative_eq!(s.marginal_effect().unwrap(), 2.0);
    }

    #[test]
    fn community_marginal_effect() {
        let s = community_scenario(50, &[20, 30, 30]);
        let e_cage = 0.1 + 0.2 + 0.6 + 1.2;
        let expected = 40.0 - 2.0 * 27.0 + 8.5 * 0.25 + 3.5 * 0.23 + 1.5 * 14.0 - 2.0 * e_cage + 2.0 * 0.0;
        assert_relative_eq!(s.marginal_effect().unwrap(), expected, epsilon = 1e-12);
        assert_relative_eq!(s.marginal_effect().unwrap(), 5.73, epsilon = 1e-12);
    }

    #[test]
    fn no_missingness_switch_observes_everything() {
        let mut s = default_interference(SampleSize::Small, CorrelationLevel::Low);
        s.missingness = None;
        let g = s.generate(3).unwrap();
        assert_eq!(g.data.n_observed(), g.data.n_total());
        assert_eq!(g.data, g.complete);
    }

    #[test]
    fn generated_trial_structure() {
        let s = community_scenario(12, &[4, 6]);
        let g = s.generate(11).unwrap();
        assert_eq!(g.data.n_clusters(), 12);
        assert!(g.data.clusters().iter().all(|b| b.size() == 4 || b.size() == 6));
        assert!(g.data.covariate_index("mean_CAGE").is_ok());
        assert!(g.data.is_categorical("CAGE").unwrap());
        for b in g.data.clusters() {
            let k = g.data.covariate_index("mean_AGE").unwrap();
            let a = g.data.covariate_index("AGE").unwrap();
            let m = b.covariates.column(a).mean();
            assert!(b.covariates.column(k).iter().all(|v| (v - m).abs() < 1e-12));
        }
        for (m, c) in g.data.clusters().iter().zip(g.complete.clusters()) {
            for (y, yc) in m.outcomes.iter().zip(&c.outcomes) {
                assert!(yc.is_some());
                if let Some(v) = y {
                    assert_eq!(Some(*v), *yc);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = default_interference(SampleSize::Small, CorrelationLevel::High);
        assert_eq!(s.generate(5).unwrap(), s.generate(5).unwrap());
        assert_ne!(s.generate(5).unwrap(), s.generate(6).unwrap());
    }

    #[test]
    fn scenario_validation() {
        let mut s = default_interference(SampleSize::Small, CorrelationLevel::Low);
        s.outcome.terms.insert("A:Z9".into(), 1.0);
        assert!(matches!(s.validate(), Err(Error::UnknownCovariate(_))));
        let mut s = default_interference(SampleSize::Small, CorrelationLevel::Low);
        s.size_menu.clear();
        assert!(s.validate().is_err());
        let mut s = community_scenario(5, &[3]);
        s.covariates[4].law = CovariateLaw::Categorical { probs: vec![0.5, 0.4] };
        assert!(s.validate().is_err());
    }

    #[test]
    fn study_toml_round_trip() {
        for name in BUILTIN_NAMES {
            let study = builtin_study(name, SampleSize::Large, CorrelationLevel::Low, None).unwrap();
            let text = study.to_toml().unwrap();
            assert_eq!(Study::from_toml(&text).unwrap(), study);
        }
    }

    #[test]
    fn grid_parsing_and_expansion() {
        let (om, ps) = parse_grid("om=true,miss ps=true,miss,none").unwrap();
        assert_eq!(om.len(), 2);
        assert_eq!(ps.len(), 3);
        let study = builtin_study("table3", SampleSize::Small, CorrelationLevel::Low, Some((&om, &ps))).unwrap();
        let dr: Vec<&str> = study
            .estimators
            .iter()
            .filter(|e| e.kind == EstimatorKind::Dr)
            .map(|e| e.label.as_str())
            .collect();
        assert_eq!(dr.len(), 6);
        assert_eq!(dr[0], "DR.OM.TRUE.PS.TRUE");
        assert_eq!(dr[5], "DR.OM.MISS.PS.NONE");
        assert!(parse_grid("om=none ps=true").is_ok());
        assert!(dr_grid(&[GridLevel::None], &[GridLevel::True]).is_err());
        assert!(parse_grid("om=true").is_err());
        assert!(parse_grid("xx=true ps=true").is_err());
        assert!(builtin_study("table4", SampleSize::Small, CorrelationLevel::Low, Some((&om, &ps))).is_err());
        assert!(builtin_study("table9", SampleSize::Small, CorrelationLevel::Low, None).is_err());
    }

    #[test]
    fn icc_of_perfectly_clustered_outcomes_is_one() {
        let blocks = (0..4)
            .map(|i| {
                let v = i as f64;
                ClusterBlock::new(format!("{i}"), (i % 2) as u8, vec![Some(v); 3], DMatrix::zeros(3, 0)).unwrap()
            })
            .collect();
        let d = TrialDataset::new(blocks, vec![]).unwrap();
        assert_relative_eq!(empirical_icc(&d).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn run_mc_is_independent_of_thread_count() {
        let mut study = builtin_study("table3", SampleSize::Small, CorrelationLevel::Low, None).unwrap();
        study.scenario.clusters = 8;
        study.scenario.size_menu = vec![5, 8];
        let a = run_mc(&study, &McOptions::new(6, 9).with_jobs(1)).unwrap();
        let b = run_mc(&study, &McOptions::new(6, 9).with_jobs(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 6 * study.estimators.len() * 2);
    }
}
