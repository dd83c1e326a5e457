//! Command-line front end: `fit`, `simulate` and `report`.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 non-convergence (`fit`)
//! or too many failed replicates (`simulate`, after writing its outputs).

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::correlation::CorrelationKind;
use crate::dataset::{load_csv, CsvSchema, ModelSpec, Term, TrialDataset, ARM_TERM};
use crate::error::{Error, Result};
use crate::estimator::{solve, EstimatorConfig, EstimatorKind, FitResult, VarianceMethod, WeightPlacement};
use crate::glm::{select_outcome, select_propensity, Selection, StepDirection};
use crate::simulate::{
    builtin_study, parse_grid, read_records, run_mc, summarize, summarize_to_table, write_records,
    CorrelationLevel, McOptions, SampleSize, Study, TableFormat,
};

pub const FIT_REPORT_SCHEMA_VERSION: &str = "1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NONCONVERGENCE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "drgee", version, about = "Doubly robust GEE for cluster-randomized trials with missing outcomes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one estimator to a CSV dataset and print a JSON report.
    Fit(FitArgs),
    /// Run a Monte Carlo study.
    Simulate(SimulateArgs),
    /// Re-summarise a per-replicate estimates file.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub cluster: String,
    #[arg(long)]
    pub arm: String,
    #[arg(long)]
    pub outcome: String,
    /// Covariate columns; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Covariates whose cluster mean (mode if categorical) is added as mean_<name>.
    #[arg(long, value_delimiter = ',')]
    pub cluster_means: Vec<String>,
    /// Covariates to treat as categorical when summarising clusters.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    #[arg(long, default_value = "gee")]
    pub estimator: EstimatorKind,
    #[arg(long, default_value = "independence")]
    pub corstr: CorrelationKind,
    #[arg(long, default_value = "vinvw")]
    pub placement: WeightPlacement,
    /// Propensity terms, or candidates with --stepwise.
    #[arg(long)]
    pub ps: Option<String>,
    /// Outcome-model terms for both arms, or candidates with --stepwise.
    #[arg(long)]
    pub om: Option<String>,
    #[arg(long)]
    pub om0: Option<String>,
    #[arg(long)]
    pub om1: Option<String>,
    /// Select nuisance-model terms by stepwise AIC; missing lists default to all covariates.
    #[arg(long)]
    pub stepwise: bool,
    /// Stepwise search direction: forward or both.
    #[arg(long, default_value = "both")]
    pub direction: String,
    /// Add A:<term> for every covariate term of the propensity list.
    #[arg(long)]
    pub interactions: bool,
    /// Comma-separated subset of robust, adjusted, fay.
    #[arg(long, value_delimiter = ',', default_value = "robust,nuisance_adjusted,fay")]
    pub variance: Vec<VarianceMethod>,
    #[arg(long, default_value_t = 1e-6)]
    pub pi_floor: f64,
    #[arg(long)]
    pub truncation: Option<f64>,
    #[arg(long)]
    pub p_treat: Option<f64>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Report destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// table3, table4 or table5.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    pub builtin: Option<String>,
    /// TOML study file.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// small or large.
    #[arg(long, default_value = "large")]
    pub sample: String,
    /// low or high.
    #[arg(long, default_value = "low")]
    pub correlation: String,
    /// Double-robustness grid for table3, e.g. "om=true,miss ps=true,miss,none".
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub replicates: usize,
    /// Overrides the number of clusters.
    #[arg(long = "M")]
    pub clusters: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value = "both")]
    pub direction: String,
    /// csv, json or markdown.
    #[arg(long, default_value = "markdown")]
    pub format: String,
    /// Summary destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-replicate estimates CSV.
    #[arg(long)]
    pub estimates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Per-replicate estimates CSV written by `simulate`.
    #[arg(long)]
    pub estimates: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value = "markdown")]
    pub format: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Report(a) => cmd_report(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string() }));
            EXIT_INPUT
        }
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            w.write_all(text.as_bytes())?;
            w.flush()?;
        }
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

fn parse_direction(s: &str) -> Result<StepDirection> {
    match s.to_ascii_lowercase().as_str() {
        "forward" => Ok(StepDirection::Forward),
        "both" => Ok(StepDirection::Both),
        other => Err(Error::Config(format!("unknown stepwise direction '{other}'"))),
    }
}

fn csv_header(path: &Path) -> Result<Vec<String>> {
    let mut rd = csv::Reader::from_path(path)?;
    Ok(rd.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

fn load_fit_data(a: &FitArgs) -> Result<TrialDataset> {
    let covariates = match &a.covariates {
        Some(c) => c.clone(),
        None => csv_header(&a.data)?
            .into_iter()
            .filter(|h| ![&a.cluster, &a.arm, &a.outcome].contains(&h))
            .collect(),
    };
    let refs: Vec<&str> = covariates.iter().map(String::as_str).collect();
    let mut data = load_csv(&a.data, &CsvSchema::new(&a.cluster, &a.arm, &a.outcome, &refs))?;
    for c in &a.categorical {
        data.set_categorical(c, true)?;
    }
    if !a.cluster_means.is_empty() {
        data = data.append_cluster_means(&a.cluster_means)?;
    }
    Ok(data)
}

fn with_interactions(spec: ModelSpec) -> Result<ModelSpec> {
    let mut terms = spec.terms().to_vec();
    for t in spec.terms() {
        if let Term::Covariate(c) = t {
            let inter = Term::ArmInteraction(c.clone());
            if !terms.contains(&inter) {
                terms.push(inter);
            }
        }
    }
    ModelSpec::new(terms)
}

fn all_covariates(data: &TrialDataset) -> String {
    data.covariate_names().join(",")
}

/// Checks flag combinations that need no data.
fn validate_fit_flags(a: &FitArgs) -> Result<()> {
    let has_om = a.om.is_some() || (a.om0.is_some() && a.om1.is_some());
    if a.om.is_some() && (a.om0.is_some() || a.om1.is_some()) {
        return Err(Error::Config("use either --om or --om0/--om1, not both".into()));
    }
    if a.om0.is_some() != a.om1.is_some() {
        return Err(Error::Config("--om0 and --om1 must be given together".into()));
    }
    if a.estimator.uses_propensity() && a.ps.is_none() && !a.stepwise {
        return Err(Error::Config(format!(
            "--estimator {} requires --ps or --stepwise",
            a.estimator
        )));
    }
    if a.estimator.uses_outcome_model() && !has_om && !a.stepwise {
        return Err(Error::Config(format!(
            "--estimator {} requires --om (or --om0 and --om1) or --stepwise",
            a.estimator
        )));
    }
    if a.variance.is_empty() {
        return Err(Error::Config("--variance needs at least one method".into()));
    }
    parse_direction(&a.direction)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SelectionReport {
    model: String,
    terms: Vec<String>,
    aic: f64,
    steps: usize,
    warnings: Vec<String>,
}

fn selection_report(model: &str, spec: &ModelSpec, sel: &Selection) -> SelectionReport {
    SelectionReport {
        model: model.to_string(),
        terms: spec.terms().iter().map(Term::to_string).collect(),
        aic: sel.aic,
        steps: sel.steps,
        warnings: sel.warnings.clone(),
    }
}

fn build_fit_config(a: &FitArgs, data: &TrialDataset) -> Result<(EstimatorConfig, Vec<SelectionReport>)> {
    let direction = parse_direction(&a.direction)?;
    let mut cfg = EstimatorConfig::new(a.estimator)
        .with_correlation(a.corstr)
        .with_placement(a.placement)
        .with_variance_methods(&a.variance);
    cfg.pi_floor = a.pi_floor;
    cfg.truncation = a.truncation;
    cfg.p_treat_override = a.p_treat;
    cfg.level = a.level;
    cfg.max_iter = a.max_iter;
    cfg.tol = a.tol;
    let mut selections = Vec::new();
    if a.estimator.uses_propensity() {
        let list = a.ps.clone().unwrap_or_else(|| format!("{ARM_TERM},{}", all_covariates(data)));
        let mut spec = ModelSpec::parse(&list)?;
        if a.interactions {
            spec = with_interactions(spec)?;
        }
        if a.stepwise {
            let (selected, sel) = select_propensity(data, spec.terms(), direction)?;
            selections.push(selection_report("propensity", &selected, &sel));
            spec = selected;
        }
        cfg = cfg.with_ps(spec);
    }
    if a.estimator.uses_outcome_model() {
        let lists = match (&a.om, &a.om0, &a.om1) {
            (Some(both), _, _) => [both.clone(), both.clone()],
            (None, Some(l0), Some(l1)) => [l0.clone(), l1.clone()],
            _ => [all_covariates(data), all_covariates(data)],
        };
        let mut specs = [ModelSpec::parse(&lists[0])?, ModelSpec::parse(&lists[1])?];
        if a.stepwise {
            for arm in 0..2u8 {
                let (selected, sel) = select_outcome(data, arm, specs[arm as usize].terms(), direction)?;
                selections.push(selection_report(&format!("outcome_arm{arm}"), &selected, &sel));
                specs[arm as usize] = selected;
            }
        }
        let [s0, s1] = specs;
        cfg = cfg.with_om_pair(s0, s1);
    }
    cfg.validate()?;
    Ok((cfg, selections))
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

/// JSON fit report; layout documented by `schemas/fit_report.v1.json`.
pub fn fit_report(data: &TrialDataset, fit: &FitResult, selections: &[impl Serialize]) -> Value {
    let coefficients: Vec<Value> = fit
        .coefficient_names
        .iter()
        .zip(fit.beta.iter())
        .map(|(n, b)| json!({ "name": n, "estimate": b }))
        .collect();
    let inference: Vec<Value> = fit
        .inference
        .iter()
        .map(|i| {
            json!({
                "method": i.method.to_string(),
                "coefficient": i.coefficient,
                "estimate": i.estimate,
                "se": finite_or_null(i.se),
                "z": finite_or_null(i.z),
                "p_value": finite_or_null(i.p_value),
                "ci_lower": finite_or_null(i.ci_lower),
                "ci_upper": finite_or_null(i.ci_upper),
            })
        })
        .collect();
    let propensity = match (&fit.ps_spec, &fit.ps_fit) {
        (Some(spec), Some(ps)) => json!({
            "terms": spec.column_names(),
            "coefficients": ps.coefficients.as_slice(),
            "converged": ps.converged,
            "iterations": ps.iterations,
            "separation": ps.separation,
        }),
        _ => Value::Null,
    };
    let outcome = match &fit.om_fits {
        Some(pair) => Value::Array(
            (0..2u8)
                .map(|a| {
                    json!({
                        "arm": a,
                        "terms": pair.spec(a).column_names(),
                        "coefficients": pair.fit(a).coefficients.as_slice(),
                        "residual_variance": pair.fit(a).residual_variance,
                    })
                })
                .collect(),
        ),
        None => Value::Null,
    };
    json!({
        "schema_version": FIT_REPORT_SCHEMA_VERSION,
        "estimator": fit.kind.label(),
        "correlation": fit.correlation.to_string(),
        "placement": fit.placement.to_string(),
        "converged": fit.converged,
        "iterations": fit.iterations,
        "final_eq_norm": fit.final_eq_norm,
        "coefficients": coefficients,
        "marginal_effect": fit.marginal_effect,
        "inference": inference,
        "level": fit.level,
        "alpha": fit.alpha,
        "phi": fit.phi,
        "p_treat": fit.p_treat,
        "data": {
            "clusters": data.n_clusters(),
            "subjects": data.n_total(),
            "observed": data.n_observed(),
        },
        "propensity_model": propensity,
        "outcome_models": outcome,
        "selection": selections,
        "weights": {
            "floored": fit.n_weights_floored,
            "truncated": fit.n_weights_truncated,
        },
        "warnings": fit.warnings,
    })
}

pub fn cmd_fit(a: &FitArgs) -> Result<i32> {
    validate_fit_flags(a)?;
    let data = load_fit_data(a)?;
    let (cfg, selections) = build_fit_config(a, &data)?;
    let fit = solve(&data, &cfg)?;
    let report = fit_report(&data, &fit, &selections);
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    write_output(a.out.as_deref(), &text)?;
    Ok(if fit.converged { EXIT_OK } else { EXIT_NONCONVERGENCE })
}

fn load_study(a: &SimulateArgs) -> Result<Study> {
    let mut study = match (&a.builtin, &a.scenario) {
        (Some(name), None) => {
            let sample: SampleSize = a.sample.parse()?;
            let corr: CorrelationLevel = a.correlation.parse()?;
            let grid = a.grid.as_deref().map(parse_grid).transpose()?;
            builtin_study(
                name,
                sample,
                corr,
                grid.as_ref().map(|(o, p)| (o.as_slice(), p.as_slice())),
            )?
        }
        (None, Some(path)) => {
            if a.grid.is_some() {
                return Err(Error::Config("--grid applies only to --builtin table3".into()));
            }
            Study::from_toml(&std::fs::read_to_string(path)?)?
        }
        _ => return Err(Error::Config("give exactly one of --builtin and --scenario".into())),
    };
    if let Some(m) = a.clusters {
        study.scenario.clusters = m;
    }
    study.validate()?;
    Ok(study)
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let format: TableFormat = a.format.parse()?;
    if a.replicates < 2 {
        return Err(Error::Config("--replicates must be at least 2".into()));
    }
    let study = load_study(a)?;
    let opts = McOptions {
        replicates: a.replicates,
        seed: a.seed,
        jobs: a.jobs,
        level: a.level,
        direction: parse_direction(&a.direction)?,
    };
    let run = run_mc(&study, &opts)?;
    if let Some(path) = &a.estimates {
        write_records(BufWriter::new(File::create(path)?), &run.records)?;
    }
    write_output(a.out.as_deref(), &summarize_to_table(&run.summary, format)?)?;
    match run.summary.check_failures() {
        Ok(()) => Ok(EXIT_OK),
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string() }));
            Ok(EXIT_NONCONVERGENCE)
        }
    }
}

pub fn cmd_report(a: &ReportArgs) -> Result<i32> {
    let format: TableFormat = a.format.parse()?;
    let records = read_records(File::open(&a.estimates)?)?;
    let scenario = records.first().map(|r| r.scenario.clone()).unwrap_or_default();
    let summary = summarize(&scenario, &records, a.level)?;
    write_output(a.out.as_deref(), &summarize_to_table(&summary, format)?)?;
    Ok(EXIT_OK)
}
