//! GEE, IPW, augmented and doubly robust estimating equations for the
//! marginal model μ = β₀ + β_A·A under an identity link.
//!
//! Every equation is linear in β once the working correlation, dispersion
//! and nuisance models are fixed, so each outer iteration is a single exact
//! Newton step followed by a moment update of α and φ, with the α update
//! relaxed when it starts to oscillate.
//!
//! Cluster contributions:
//!
//! * GEE: Dᵀ V⁻¹ (Y − μ) over observed rows, V built over the observed subset.
//! * IPW: Dᵀ V⁻¹ W (Y − μ), or Dᵀ W^½ V⁻¹ W^½ (Y − μ), V over all rows.
//! * AUG: the GEE term minus Σ_a (1{A=a} − p_a) D(a)ᵀ V⁻¹ (B_a − μ_a) over
//!   all rows, i.e. the GEE term − Dᵀ V⁻¹ (B_A − μ) + the DR augmentation.
//! * DR: Dᵀ V⁻¹ W (Y − B_A) plus the same augmentation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::correlation::{alpha_from_sums, phi_from_sums, CorrelationKind, WorkingCorrelation};
use crate::dataset::{ModelSpec, TrialDataset, ARM_TERM};
use crate::error::{Error, Result};
use crate::glm::{expit, fit_outcome_pair, fit_propensity, LogisticFit, OutcomePair};
use crate::variance::{
    checked_inverse, fay_corrected, nuisance_adjusted, robust_sandwich, StackLayout, StackedSystem,
    DEFAULT_FAY_Q,
};

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }
        impl std::str::FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($text $(| $alias)* => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Gee,
    Ipw,
    Aug,
    Dr,
}

string_enum!(EstimatorKind { Gee => "gee", Ipw => "ipw", Aug => "aug", Dr => "dr" });

impl EstimatorKind {
    pub fn uses_propensity(self) -> bool {
        matches!(self, EstimatorKind::Ipw | EstimatorKind::Dr)
    }

    pub fn uses_outcome_model(self) -> bool {
        matches!(self, EstimatorKind::Aug | EstimatorKind::Dr)
    }

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Gee => "GEE",
            EstimatorKind::Ipw => "IPW",
            EstimatorKind::Aug => "AUG",
            EstimatorKind::Dr => "DR",
        }
    }
}

/// Where the inverse-probability weights enter the residual term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightPlacement {
    /// V⁻¹W.
    #[default]
    VinvW,
    /// W^½V⁻¹W^½.
    Whalf,
}

string_enum!(WeightPlacement { VinvW => "vinvw" | "vinv_w", Whalf => "whalf" | "whalfvinvwhalf" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    Robust,
    NuisanceAdjusted,
    Fay,
}

string_enum!(VarianceMethod {
    Robust => "robust",
    NuisanceAdjusted => "nuisance_adjusted" | "adjusted",
    Fay => "fay"
});

pub const ALL_VARIANCE_METHODS: [VarianceMethod; 3] = [
    VarianceMethod::Robust,
    VarianceMethod::NuisanceAdjusted,
    VarianceMethod::Fay,
];

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub correlation: CorrelationKind,
    pub placement: WeightPlacement,
    pub ps_spec: Option<ModelSpec>,
    /// Adds the arm indicator to the propensity model.
    pub ps_include_arm: bool,
    pub om_spec0: Option<ModelSpec>,
    pub om_spec1: Option<ModelSpec>,
    pub variance_methods: Vec<VarianceMethod>,
    /// Probabilities below this are raised to it before inversion.
    pub pi_floor: f64,
    /// Upper cap on individual weights.
    pub truncation: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    pub p_treat_override: Option<f64>,
    pub fay_q: f64,
    /// Marginal model (1, A) when true, intercept only otherwise.
    pub include_arm: bool,
    pub level: f64,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        EstimatorConfig {
            kind,
            correlation: CorrelationKind::Independence,
            placement: WeightPlacement::VinvW,
            ps_spec: None,
            ps_include_arm: true,
            om_spec0: None,
            om_spec1: None,
            variance_methods: ALL_VARIANCE_METHODS.to_vec(),
            pi_floor: 1e-6,
            truncation: None,
            max_iter: 50,
            tol: 1e-8,
            p_treat_override: None,
            fay_q: DEFAULT_FAY_Q,
            include_arm: true,
            level: 0.95,
        }
    }

    pub fn with_correlation(mut self, c: CorrelationKind) -> Self {
        self.correlation = c;
        self
    }

    pub fn with_placement(mut self, p: WeightPlacement) -> Self {
        self.placement = p;
        self
    }

    pub fn with_ps(mut self, spec: ModelSpec) -> Self {
        self.ps_spec = Some(spec);
        self
    }

    /// Same outcome-model terms in both arms.
    pub fn with_om(self, spec: ModelSpec) -> Self {
        self.with_om_pair(spec.clone(), spec)
    }

    pub fn with_om_pair(mut self, spec0: ModelSpec, spec1: ModelSpec) -> Self {
        self.om_spec0 = Some(spec0);
        self.om_spec1 = Some(spec1);
        self
    }

    pub fn with_variance_methods(mut self, methods: &[VarianceMethod]) -> Self {
        self.variance_methods = methods.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.uses_propensity() && self.ps_spec.is_none() {
            return Err(Error::Config(format!(
                "{} requires a propensity model specification",
                self.kind.label()
            )));
        }
        if self.kind.uses_outcome_model() && (self.om_spec0.is_none() || self.om_spec1.is_none()) {
            return Err(Error::Config(format!(
                "{} requires outcome model specifications for both arms",
                self.kind.label()
            )));
        }
        if !(0.0..0.5).contains(&self.pi_floor) {
            return Err(Error::Config(format!("pi_floor must lie in [0, 0.5), got {}", self.pi_floor)));
        }
        if let Some(t) = self.truncation {
            if !(t > 0.0) {
                return Err(Error::Config(format!("truncation must be positive, got {t}")));
            }
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::Config("max_iter and tol must be positive".into()));
        }
        if let Some(p) = self.p_treat_override {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("p_treat must lie in (0, 1), got {p}")));
            }
        }
        if !(0.0..1.0).contains(&self.fay_q) {
            return Err(Error::Config(format!("Fay bound must lie in [0, 1), got {}", self.fay_q)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("confidence level must lie in (0, 1), got {}", self.level)));
        }
        Ok(())
    }

    /// Propensity terms as fitted (arm indicator appended when requested).
    pub fn effective_ps_spec(&self) -> Option<ModelSpec> {
        self.ps_spec.clone().map(|s| if self.ps_include_arm { s.with_arm() } else { s })
    }

    pub fn mean_dim(&self) -> usize {
        if self.include_arm {
            2
        } else {
            1
        }
    }
}

/// Per-subject weights of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightAssembly {
    pub weights: Vec<f64>,
    /// True where the weight varies smoothly with the propensity coefficients.
    pub responsive: Vec<bool>,
    pub n_floored: usize,
    pub n_truncated: usize,
}

/// w = R / max(π, floor), capped at `truncation`; missing rows get 0.
pub fn assemble_weights(
    observed: &[bool],
    pi: &[f64],
    pi_floor: f64,
    truncation: Option<f64>,
) -> Result<WeightAssembly> {
    if observed.len() != pi.len() {
        return Err(Error::Dimension("weights: indicator and probability lengths differ".into()));
    }
    let mut out = WeightAssembly {
        weights: Vec::with_capacity(pi.len()),
        responsive: Vec::with_capacity(pi.len()),
        n_floored: 0,
        n_truncated: 0,
    };
    for (&r, &p) in observed.iter().zip(pi) {
        if !(p > 0.0) {
            return Err(Error::Validation(format!("propensity {p} is not positive")));
        }
        if !r {
            out.weights.push(0.0);
            out.responsive.push(false);
            continue;
        }
        let mut responsive = true;
        let floored = p < pi_floor;
        if floored {
            out.n_floored += 1;
            responsive = false;
        }
        let mut w = 1.0 / p.max(pi_floor);
        if let Some(cap) = truncation {
            if w > cap {
                w = cap;
                out.n_truncated += 1;
                responsive = false;
            }
        }
        out.weights.push(w);
        out.responsive.push(responsive);
    }
    Ok(out)
}

fn arm_probability(a: u8, p: f64) -> f64 {
    if a == 1 {
        p
    } else {
        1.0 - p
    }
}

fn mean_row(include_arm: bool, a: u8) -> DVector<f64> {
    if include_arm {
        DVector::from_vec(vec![1.0, f64::from(a)])
    } else {
        DVector::from_element(1, 1.0)
    }
}

/// 1ᵀV⁻¹1 / n for a block of size n.
fn kappa(corr: &WorkingCorrelation, n: usize, phi: f64) -> Result<f64> {
    Ok(corr.row_sum_factor(n)? / phi)
}

/// Σ_a p_a D(a)ᵀ V⁻¹ (B_a − μ_a) for one cluster, given Σ_j B_a over its n subjects.
fn augmentation_term(
    sum_b: [f64; 2],
    n: usize,
    beta: &DVector<f64>,
    p_treat: f64,
    k: f64,
    include_arm: bool,
) -> DVector<f64> {
    let mut out = DVector::zeros(beta.len());
    for a in 0..2u8 {
        let d = mean_row(include_arm, a);
        let mu = d.dot(beta);
        out.axpy(arm_probability(a, p_treat) * k * (sum_b[a as usize] - n as f64 * mu), &d, 1.0);
    }
    out
}

/// Per-cluster augmentation contributions from outcome-model predictions
/// `predictions[i][a][j]` = B(X_ij, a) for every subject, missing or not.
pub fn augmentation_residual(
    data: &TrialDataset,
    predictions: &[[Vec<f64>; 2]],
    beta: &DVector<f64>,
    p_treat: f64,
    corr: &WorkingCorrelation,
    phi: f64,
) -> Result<Vec<DVector<f64>>> {
    if predictions.len() != data.n_clusters() {
        return Err(Error::Dimension("one prediction pair per cluster required".into()));
    }
    let include_arm = match beta.len() {
        1 => false,
        2 => true,
        q => return Err(Error::Dimension(format!("mean model has {q} coefficients"))),
    };
    data.clusters()
        .iter()
        .zip(predictions)
        .map(|(block, pred)| {
            let n = block.size();
            if pred[0].len() != n || pred[1].len() != n {
                return Err(Error::Dimension(format!("cluster {}: prediction length", block.id)));
            }
            let sums = [pred[0].iter().sum(), pred[1].iter().sum()];
            Ok(augmentation_term(sums, n, beta, p_treat, kappa(corr, n, phi)?, include_arm))
        })
        .collect()
}

/// Nuisance coefficients Ω \ β, plus the fixed outcome-score scale.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceParams {
    pub eta_w: Option<DVector<f64>>,
    pub eta_b: [Option<DVector<f64>>; 2],
    /// Residual variances dividing the outcome-model scores.
    pub sigma2: [f64; 2],
}

/// Fitted nuisance models.
#[derive(Debug, Clone, PartialEq)]
pub struct Nuisances {
    pub params: NuisanceParams,
    pub ps_fit: Option<LogisticFit>,
    pub om_fits: Option<OutcomePair>,
}

#[derive(Debug, Clone)]
struct ClusterDesign {
    xw: Option<DMatrix<f64>>,
    xb: [Option<DMatrix<f64>>; 2],
}

/// Nuisance-model values for every subject of one cluster.
#[derive(Debug, Clone)]
struct SubjectValues {
    pi: Vec<f64>,
    w: Vec<f64>,
    responsive: Vec<bool>,
    b: [Vec<f64>; 2],
}

/// Nuisance values across the dataset.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<SubjectValues>,
    sums: Vec<ClusterSums>,
    pub n_floored: usize,
    pub n_truncated: usize,
}

/// β-free sufficient statistics of one cluster.
#[derive(Debug, Clone, Copy, Default)]
struct ClusterSums {
    arm: u8,
    n: usize,
    n_obs: usize,
    sy: f64,
    syy: f64,
    sw: f64,
    swy: f64,
    ss: f64,
    ssy: f64,
    swb: f64,
    ssb: f64,
    sb: [f64; 2],
}

/// An estimator bound to a dataset: resolved designs and stack layout.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    data: &'a TrialDataset,
    config: EstimatorConfig,
    p_treat: f64,
    ps_spec: Option<ModelSpec>,
    designs: Vec<ClusterDesign>,
    layout: StackLayout,
}

impl<'a> Problem<'a> {
    pub fn new(data: &'a TrialDataset, config: &EstimatorConfig) -> Result<Self> {
        config.validate()?;
        let kind = config.kind;
        let ps_spec = if kind.uses_propensity() { config.effective_ps_spec() } else { None };
        let ps_resolved = ps_spec.as_ref().map(|s| s.resolve(data)).transpose()?;
        let om_resolved = if kind.uses_outcome_model() {
            [
                Some(config.om_spec0.as_ref().expect("validated").resolve(data)?),
                Some(config.om_spec1.as_ref().expect("validated").resolve(data)?),
            ]
        } else {
            [None, None]
        };
        let designs = data
            .clusters()
            .iter()
            .map(|block| ClusterDesign {
                xw: ps_resolved.as_ref().map(|r| r.cluster_design(block, block.arm)),
                xb: [
                    om_resolved[0].as_ref().map(|r| r.cluster_design(block, 0)),
                    om_resolved[1].as_ref().map(|r| r.cluster_design(block, 1)),
                ],
            })
            .collect();
        let dim = |r: &Option<crate::dataset::ResolvedSpec>| r.as_ref().map_or(0, |r| r.n_columns());
        let layout = StackLayout::new(config.mean_dim())
            .with_block("ps", dim(&ps_resolved))
            .with_block("om0", dim(&om_resolved[0]))
            .with_block("om1", dim(&om_resolved[1]));
        Ok(Problem {
            data,
            config: config.clone(),
            p_treat: config.p_treat_override.unwrap_or(data.p_treat()),
            ps_spec,
            designs,
            layout,
        })
    }

    pub fn layout(&self) -> &StackLayout {
        &self.layout
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn p_treat(&self) -> f64 {
        self.p_treat
    }

    pub fn fit_nuisances(&self) -> Result<Nuisances> {
        let ps_fit = match &self.ps_spec {
            Some(spec) => Some(fit_propensity(self.data, spec)?),
            None => None,
        };
        let om_fits = if self.config.kind.uses_outcome_model() {
            Some(fit_outcome_pair(
                self.data,
                self.config.om_spec0.as_ref().expect("validated"),
                self.config.om_spec1.as_ref().expect("validated"),
            )?)
        } else {
            None
        };
        let scale = |s: f64| if s > 0.0 { s } else { 1.0 };
        Ok(Nuisances {
            params: NuisanceParams {
                eta_w: ps_fit.as_ref().map(|f| f.coefficients.clone()),
                eta_b: [
                    om_fits.as_ref().map(|o| o.fit0.coefficients.clone()),
                    om_fits.as_ref().map(|o| o.fit1.coefficients.clone()),
                ],
                sigma2: om_fits
                    .as_ref()
                    .map_or([1.0, 1.0], |o| [scale(o.fit0.residual_variance), scale(o.fit1.residual_variance)]),
            },
            ps_fit,
            om_fits,
        })
    }

    /// Weights and outcome-model predictions at the given nuisance coefficients.
    pub fn evaluate(&self, params: &NuisanceParams) -> Result<Evaluation> {
        let mut values = Vec::with_capacity(self.data.n_clusters());
        let mut sums = Vec::with_capacity(self.data.n_clusters());
        let (mut n_floored, mut n_truncated) = (0, 0);
        for (block, design) in self.data.clusters().iter().zip(&self.designs) {
            let n = block.size();
            let observed = block.observed();
            let (pi, assembly) = match (&design.xw, &params.eta_w) {
                (Some(x), Some(eta)) => {
                    let lin = x * eta;
                    let pi: Vec<f64> = lin.iter().map(|&e| expit(e).clamp(1e-15, 1.0 - 1e-15)).collect();
                    let a = assemble_weights(&observed, &pi, self.config.pi_floor, self.config.truncation)?;
                    (pi, a)
                }
                (None, _) => (
                    vec![1.0; n],
                    WeightAssembly {
                        weights: observed.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect(),
                        responsive: vec![false; n],
                        n_floored: 0,
                        n_truncated: 0,
                    },
                ),
                (Some(_), None) => {
                    return Err(Error::Config("propensity coefficients missing".into()))
                }
            };
            n_floored += assembly.n_floored;
            n_truncated += assembly.n_truncated;
            let mut b = [vec![0.0; n], vec![0.0; n]];
            for a in 0..2 {
                match (&design.xb[a], &params.eta_b[a]) {
                    (Some(x), Some(eta)) => b[a] = (x * eta).iter().copied().collect(),
                    (None, _) => {}
                    (Some(_), None) => {
                        return Err(Error::Config("outcome-model coefficients missing".into()))
                    }
                }
            }
            let v = SubjectValues {
                pi,
                w: assembly.weights,
                responsive: assembly.responsive,
                b,
            };
            sums.push(cluster_sums(block, &v));
            values.push(v);
        }
        Ok(Evaluation {
            values,
            sums,
            n_floored,
            n_truncated,
        })
    }

    fn cluster_phi(
        &self,
        s: &ClusterSums,
        beta: &DVector<f64>,
        corr: &WorkingCorrelation,
        phi: f64,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let include_arm = self.config.include_arm;
        let q = beta.len();
        let d = mean_row(include_arm, s.arm);
        let m = d.dot(beta);
        let ddt = &d * d.transpose();
        let mut value = DVector::zeros(q);
        let mut jac = DMatrix::zeros(q, q);
        let kind = self.config.kind;
        match kind {
            EstimatorKind::Gee | EstimatorKind::Aug => {
                if s.n_obs > 0 {
                    let k = kappa(corr, s.n_obs, phi)?;
                    value.axpy(k * (s.sy - s.n_obs as f64 * m), &d, 1.0);
                    jac -= &ddt * (k * s.n_obs as f64);
                }
                if kind == EstimatorKind::Aug {
                    // centring: − D V⁻¹ (B_A − μ) over all rows
                    let k = kappa(corr, s.n, phi)?;
                    value.axpy(-k * (s.sb[s.arm as usize] - s.n as f64 * m), &d, 1.0);
                    jac += &ddt * (k * s.n as f64);
                }
            }
            EstimatorKind::Ipw | EstimatorKind::Dr => {
                // Σ w r and Σ s r with r = Y − μ (IPW) or Y − B_A (DR)
                let (swr, ssr, dswr, dssr) = if kind == EstimatorKind::Ipw {
                    (s.swy - m * s.sw, s.ssy - m * s.ss, s.sw, s.ss)
                } else {
                    (s.swy - s.swb, s.ssy - s.ssb, 0.0, 0.0)
                };
                match self.config.placement {
                    WeightPlacement::VinvW => {
                        let k = kappa(corr, s.n, phi)?;
                        value.axpy(k * swr, &d, 1.0);
                        jac -= &ddt * (k * dswr);
                    }
                    WeightPlacement::Whalf => {
                        let (a, c) = corr.inverse_factors(s.n)?;
                        let inv = a / phi;
                        value.axpy(inv * (swr - c * s.ss * ssr), &d, 1.0);
                        jac -= &ddt * (inv * (dswr - c * s.ss * dssr));
                    }
                }
            }
        }
        if kind.uses_outcome_model() {
            let k = kappa(corr, s.n, phi)?;
            value += augmentation_term(s.sb, s.n, beta, self.p_treat, k, include_arm);
            for a in 0..2u8 {
                let da = mean_row(include_arm, a);
                jac -= &da * da.transpose() * (arm_probability(a, self.p_treat) * k * s.n as f64);
            }
        }
        Ok((value, jac))
    }

    /// Per-cluster Φ_i(β).
    pub fn cluster_contributions(
        &self,
        ev: &Evaluation,
        beta: &DVector<f64>,
        corr: &WorkingCorrelation,
        phi: f64,
    ) -> Result<Vec<DVector<f64>>> {
        ev.sums
            .iter()
            .map(|s| self.cluster_phi(s, beta, corr, phi).map(|(v, _)| v))
            .collect()
    }

    /// Σ_i Φ_i(β) and Σ_i ∂Φ_i/∂β.
    pub fn estimating_function(
        &self,
        ev: &Evaluation,
        beta: &DVector<f64>,
        corr: &WorkingCorrelation,
        phi: f64,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let q = beta.len();
        let mut total = DVector::zeros(q);
        let mut jac = DMatrix::zeros(q, q);
        for s in &ev.sums {
            let (v, j) = self.cluster_phi(s, beta, corr, phi)?;
            total += v;
            jac += j;
        }
        Ok((total, jac))
    }

    fn initial_beta(&self, ev: &Evaluation) -> Result<DVector<f64>> {
        let q = self.config.mean_dim();
        let weighted = self.config.kind.uses_propensity();
        let mut xtx = DMatrix::zeros(q, q);
        let mut xty = DVector::zeros(q);
        for s in &ev.sums {
            let d = mean_row(self.config.include_arm, s.arm);
            let (sw, swy) = if weighted { (s.sw, s.swy) } else { (s.n_obs as f64, s.sy) };
            xtx += &d * d.transpose() * sw;
            xty.axpy(swy, &d, 1.0);
        }
        // Arms without observed outcomes leave DR/AUG solvable through the augmentation.
        Ok(xtx.try_inverse().map_or_else(|| DVector::zeros(q), |inv| inv * xty))
    }

    /// Moment estimates (α, φ) from Y − μ on observed rows.
    fn dispersion(
        &self,
        ev: &Evaluation,
        beta: &DVector<f64>,
        notes: &mut DispersionNotes,
    ) -> Result<(WorkingCorrelation, f64)> {
        let k = beta.len();
        let (mut ss, mut n_obs, mut cross, mut pairs) = (0.0, 0usize, 0.0, 0usize);
        for s in &ev.sums {
            let m = mean_row(self.config.include_arm, s.arm).dot(beta);
            let no = s.n_obs as f64;
            let se = s.sy - no * m;
            let sse = (s.syy - 2.0 * m * s.sy + no * m * m).max(0.0);
            ss += sse;
            n_obs += s.n_obs;
            cross += (se * se - sse) / 2.0;
            pairs += s.n_obs * s.n_obs.saturating_sub(1) / 2;
        }
        let (state, phi_warning) = phi_from_sums(ss, n_obs, k)?;
        notes.phi = phi_warning;
        let corr = match self.config.correlation {
            CorrelationKind::Independence => WorkingCorrelation::independence(),
            CorrelationKind::Exchangeable if pairs == 0 => {
                notes.alpha = Some("no cluster has two observed outcomes; correlation fixed at 0".into());
                WorkingCorrelation::exchangeable(0.0)
            }
            CorrelationKind::Exchangeable => {
                let (alpha, w) = alpha_from_sums(cross, pairs, state.phi, k, self.data.max_cluster_size())?;
                notes.alpha = w;
                WorkingCorrelation::exchangeable(alpha)
            }
        };
        Ok((corr, state.phi))
    }

    /// Ω = (β, η_W, η_B0, η_B1) laid out per [`Problem::layout`].
    pub fn omega(&self, beta: &DVector<f64>, params: &NuisanceParams) -> DVector<f64> {
        let mut parts: Vec<f64> = beta.iter().copied().collect();
        for eta in [&params.eta_w, &params.eta_b[0], &params.eta_b[1]].into_iter().flatten() {
            parts.extend(eta.iter());
        }
        DVector::from_vec(parts)
    }

    fn split_omega(&self, omega: &DVector<f64>, sigma2: [f64; 2]) -> Result<(DVector<f64>, NuisanceParams)> {
        if omega.len() != self.layout.dim() {
            return Err(Error::Dimension(format!(
                "parameter vector has {} entries, layout needs {}",
                omega.len(),
                self.layout.dim()
            )));
        }
        let q = self.layout.beta_dim();
        let block = |name: &str| {
            self.layout.offset(name).map(|off| {
                let dim = self.layout.blocks().iter().find(|(n, _)| n == name).map(|(_, d)| *d).unwrap();
                omega.rows(off, dim).into_owned()
            })
        };
        Ok((
            omega.rows(0, q).into_owned(),
            NuisanceParams {
                eta_w: block("ps"),
                eta_b: [block("om0"), block("om1")],
                sigma2,
            },
        ))
    }

    /// U_i(Ω) for every cluster, α and φ held fixed. Used for finite-difference checks.
    pub fn stacked_contributions(
        &self,
        omega: &DVector<f64>,
        sigma2: [f64; 2],
        corr: &WorkingCorrelation,
        phi: f64,
    ) -> Result<Vec<DVector<f64>>> {
        let (beta, params) = self.split_omega(omega, sigma2)?;
        let ev = self.evaluate(&params)?;
        (0..self.data.n_clusters())
            .map(|i| self.cluster_stack(i, &ev, &beta, &params, corr, phi, false).map(|(u, _)| u))
            .collect()
    }

    /// Stacked system with analytic derivatives at (β, nuisances).
    pub fn stack(
        &self,
        ev: &Evaluation,
        beta: &DVector<f64>,
        params: &NuisanceParams,
        corr: &WorkingCorrelation,
        phi: f64,
    ) -> Result<StackedSystem> {
        let mut us = Vec::with_capacity(self.data.n_clusters());
        let mut js = Vec::with_capacity(self.data.n_clusters());
        for i in 0..self.data.n_clusters() {
            let (u, j) = self.cluster_stack(i, ev, beta, params, corr, phi, true)?;
            us.push(u);
            js.push(j.expect("requested"));
        }
        StackedSystem::new(self.layout.clone(), us, js)
    }

    #[allow(clippy::too_many_arguments)]
    fn cluster_stack(
        &self,
        i: usize,
        ev: &Evaluation,
        beta: &DVector<f64>,
        params: &NuisanceParams,
        corr: &WorkingCorrelation,
        phi: f64,
        with_jacobian: bool,
    ) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let block = &self.data.clusters()[i];
        let design = &self.designs[i];
        let vals = &ev.values[i];
        let s = &ev.sums[i];
        let dim = self.layout.dim();
        let q = self.layout.beta_dim();
        let include_arm = self.config.include_arm;
        let kind = self.config.kind;
        let arm = block.arm;
        let n = block.size();

        let (phi_i, dphi_dbeta) = self.cluster_phi(s, beta, corr, phi)?;
        let mut u = DVector::zeros(dim);
        u.rows_mut(0, q).copy_from(&phi_i);
        let mut jac = if with_jacobian { Some(DMatrix::zeros(dim, dim)) } else { None };
        if let Some(j) = jac.as_mut() {
            j.view_mut((0, 0), (q, q)).copy_from(&dphi_dbeta);
        }
        let d = mean_row(include_arm, arm);
        let m = d.dot(beta);

        if let (Some(off), Some(xw)) = (self.layout.offset("ps"), &design.xw) {
            let p = xw.ncols();
            let mut score = DVector::zeros(p);
            for j in 0..n {
                let r = if block.outcomes[j].is_some() { 1.0 } else { 0.0 };
                score.axpy(r - vals.pi[j], &xw.row(j).transpose(), 1.0);
            }
            u.rows_mut(off, p).copy_from(&score);
            if let Some(jm) = jac.as_mut() {
                let mut info = DMatrix::zeros(p, p);
                for j in 0..n {
                    let pv = vals.pi[j] * (1.0 - vals.pi[j]);
                    let x = xw.row(j).transpose();
                    info.ger(-pv, &x, &x, 1.0);
                }
                jm.view_mut((off, off), (p, p)).copy_from(&info);

                // ∂Φ/∂η_W through the weights of observed subjects
                let resid: Vec<f64> = (0..n)
                    .map(|j| match block.outcomes[j] {
                        Some(y) if kind == EstimatorKind::Ipw => y - m,
                        Some(y) => y - vals.b[arm as usize][j],
                        None => 0.0,
                    })
                    .collect();
                let mut g = DVector::zeros(p);
                match self.config.placement {
                    WeightPlacement::VinvW => {
                        let k = kappa(corr, n, phi)?;
                        for j in 0..n {
                            if vals.responsive[j] {
                                let dw = -vals.w[j] * (1.0 - vals.pi[j]);
                                g.axpy(k * resid[j] * dw, &xw.row(j).transpose(), 1.0);
                            }
                        }
                    }
                    WeightPlacement::Whalf => {
                        let (a, c) = corr.inverse_factors(n)?;
                        let inv = a / phi;
                        let sq: Vec<f64> = vals.w.iter().map(|w| w.sqrt()).collect();
                        let sum_s: f64 = sq.iter().sum();
                        let sum_sr: f64 = sq.iter().zip(&resid).map(|(s, r)| s * r).sum();
                        for j in 0..n {
                            if vals.responsive[j] {
                                let gk = 2.0 * sq[j] * resid[j] - c * sum_sr - c * sum_s * resid[j];
                                let ds = -0.5 * sq[j] * (1.0 - vals.pi[j]);
                                g.axpy(inv * gk * ds, &xw.row(j).transpose(), 1.0);
                            }
                        }
                    }
                }
                jm.view_mut((0, off), (q, p)).ger(1.0, &d, &g, 1.0);
            }
        }

        for a in 0..2usize {
            let name = if a == 0 { "om0" } else { "om1" };
            let (Some(off), Some(xa), Some(eta)) = (self.layout.offset(name), &design.xb[a], &params.eta_b[a]) else {
                continue;
            };
            let p = xa.ncols();
            if arm as usize == a {
                let mut score = DVector::zeros(p);
                for j in 0..n {
                    if let Some(y) = block.outcomes[j] {
                        let x = xa.row(j).transpose();
                        score.axpy((y - x.dot(eta)) / params.sigma2[a], &x, 1.0);
                    }
                }
                u.rows_mut(off, p).copy_from(&score);
            }
            let Some(jm) = jac.as_mut() else { continue };
            if arm as usize == a {
                let mut info = DMatrix::zeros(p, p);
                for j in 0..n {
                    if block.outcomes[j].is_some() {
                        let x = xa.row(j).transpose();
                        info.ger(-1.0 / params.sigma2[a], &x, &x, 1.0);
                    }
                }
                jm.view_mut((off, off), (p, p)).copy_from(&info);
            }
            let mut g = DVector::zeros(p);
            let k = kappa(corr, n, phi)?;
            if kind == EstimatorKind::Dr && arm as usize == a {
                match self.config.placement {
                    WeightPlacement::VinvW => {
                        for j in 0..n {
                            g.axpy(-k * vals.w[j], &xa.row(j).transpose(), 1.0);
                        }
                    }
                    WeightPlacement::Whalf => {
                        let (af, c) = corr.inverse_factors(n)?;
                        let inv = af / phi;
                        for j in 0..n {
                            let sj = vals.w[j].sqrt();
                            g.axpy(-inv * (vals.w[j] - c * s.ss * sj), &xa.row(j).transpose(), 1.0);
                        }
                    }
                }
                jm.view_mut((0, off), (q, p)).ger(1.0, &d, &g, 1.0);
            }
            let colsum = DVector::from_fn(p, |c, _| xa.column(c).sum());
            if kind == EstimatorKind::Aug && arm as usize == a {
                jm.view_mut((0, off), (q, p)).ger(-k, &d, &colsum, 1.0);
            }
            // augmentation: p_a D(a) κ Σ_j x^a_j over all subjects
            let da = mean_row(include_arm, a as u8);
            jm.view_mut((0, off), (q, p))
                .ger(arm_probability(a as u8, self.p_treat) * k, &da, &colsum, 1.0);
        }
        Ok((u, jac))
    }

    /// Solves for β with the nuisance models held at `nuisances`.
    pub fn solve(&self, nuisances: Nuisances) -> Result<FitResult> {
        let ev = self.evaluate(&nuisances.params)?;
        let mut warnings = Vec::new();
        let cfg = &self.config;
        if cfg.kind.uses_propensity() {
            if let Some(ps) = &nuisances.ps_fit {
                if ps.separation {
                    warnings.push("propensity model shows signs of separation (|linear predictor| > 30)".into());
                }
                if !ps.converged {
                    warnings.push(format!("propensity model did not converge in {} iterations", ps.iterations));
                }
            }
            if ev.n_floored > 0 {
                warnings.push(format!(
                    "{} observation probabilities below {:e} were floored",
                    ev.n_floored, cfg.pi_floor
                ));
            }
            if ev.n_truncated > 0 {
                warnings.push(format!("{} weights truncated at {}", ev.n_truncated, cfg.truncation.unwrap_or(f64::INFINITY)));
            }
            if cfg.placement == WeightPlacement::Whalf && cfg.correlation == CorrelationKind::Exchangeable {
                warnings.push(
                    "W^1/2 V^-1 W^1/2 weight placement with a non-independence working correlation \
                     does not guarantee consistency; use V^-1 W"
                        .into(),
                );
            }
        }

        let m_clusters = self.data.n_clusters() as f64;
        let mut notes = DispersionNotes::default();
        let mut beta = self.initial_beta(&ev)?;
        let (mut corr, mut phi) = self.dispersion(&ev, &beta, &mut notes)?;
        let mut converged = false;
        let mut iterations = 0;
        let mut final_eq_norm;
        let mut settled = false;
        // Relaxation of the α update. The map α → β(α) → α̂ can have slope
        // below −1 and then cycles; halving on a non-contracting sign flip
        // restores convergence and leaves well-behaved fits untouched.
        let mut relax = 1.0;
        let mut last_delta = 0.0_f64;
        loop {
            let (total, jac) = self.estimating_function(&ev, &beta, &corr, phi)?;
            final_eq_norm = total.amax() / m_clusters;
            // keep stepping past the tolerance until β stops moving, so the
            // solution does not depend on where the tolerance was crossed
            if final_eq_norm < cfg.tol && (settled || iterations >= cfg.max_iter) {
                converged = true;
                break;
            }
            if iterations >= cfg.max_iter {
                break;
            }
            let inv = checked_inverse(&jac, "estimating-equation Jacobian")?;
            let step = inv * total;
            settled = step.amax() <= 1e-13 * beta.amax().max(1.0);
            beta -= step;
            iterations += 1;
            let (mut c, p) = self.dispersion(&ev, &beta, &mut notes)?;
            let delta = c.alpha - corr.alpha;
            if delta * last_delta < 0.0 && delta.abs() > 0.5 * last_delta.abs() {
                relax = (relax * 0.5_f64).max(1.0 / 64.0);
            }
            c.alpha = corr.alpha + relax * delta;
            last_delta = relax * delta;
            settled = settled && delta.abs() <= 1e-13;
            corr = c;
            phi = p;
        }
        if !converged {
            warnings.push(format!(
                "estimating equations did not converge in {} iterations (norm {final_eq_norm:.3e})",
                cfg.max_iter
            ));
        }
        warnings.extend(notes.alpha.take());
        warnings.extend(notes.phi.take());

        let mut vcov_robust = None;
        let mut vcov_adjusted = None;
        let mut vcov_fay = None;
        let needs_stack = cfg
            .variance_methods
            .iter()
            .any(|m| matches!(m, VarianceMethod::NuisanceAdjusted | VarianceMethod::Fay));
        // A singular bread loses only the affected variance estimates, not the fit.
        let mut degrade = |method: VarianceMethod, r: Result<DMatrix<f64>>| -> Result<Option<DMatrix<f64>>> {
            match r {
                Ok(v) => Ok(Some(v)),
                Err(e @ (Error::Singular { .. } | Error::Insufficient(_))) => {
                    warnings.push(format!("{method} variance unavailable: {e}"));
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        };
        if cfg.variance_methods.contains(&VarianceMethod::Robust) {
            let phis = self.cluster_contributions(&ev, &beta, &corr, phi)?;
            let (_, bread) = self.estimating_function(&ev, &beta, &corr, phi)?;
            vcov_robust = degrade(VarianceMethod::Robust, robust_sandwich(&phis, &bread))?;
        }
        if needs_stack {
            let stack = self.stack(&ev, &beta, &nuisances.params, &corr, phi)?;
            if cfg.variance_methods.contains(&VarianceMethod::NuisanceAdjusted) {
                vcov_adjusted = degrade(VarianceMethod::NuisanceAdjusted, nuisance_adjusted(&stack).map(|v| v.beta))?;
            }
            if cfg.variance_methods.contains(&VarianceMethod::Fay) {
                vcov_fay = degrade(VarianceMethod::Fay, fay_corrected(&stack, cfg.fay_q).map(|v| v.beta))?;
            }
        }

        let names = mean_coefficient_names(cfg.include_arm);
        let z = Normal::new(0.0, 1.0).expect("standard normal");
        let crit = z.inverse_cdf(0.5 + cfg.level / 2.0);
        let mut inference = Vec::new();
        for (method, v) in [
            (VarianceMethod::Robust, &vcov_robust),
            (VarianceMethod::NuisanceAdjusted, &vcov_adjusted),
            (VarianceMethod::Fay, &vcov_fay),
        ] {
            let Some(v) = v else { continue };
            for (k, name) in names.iter().enumerate() {
                let se = v[(k, k)].max(0.0).sqrt();
                let stat = beta[k] / se;
                inference.push(Inference {
                    method,
                    coefficient: name.clone(),
                    estimate: beta[k],
                    se,
                    z: stat,
                    p_value: 2.0 * z.cdf(-stat.abs()),
                    ci_lower: beta[k] - crit * se,
                    ci_upper: beta[k] + crit * se,
                });
            }
        }

        Ok(FitResult {
            kind: cfg.kind,
            correlation: cfg.correlation,
            placement: cfg.placement,
            marginal_effect: if cfg.include_arm { Some(beta[1]) } else { None },
            coefficient_names: names,
            beta,
            alpha: corr.alpha,
            phi,
            p_treat: self.p_treat,
            vcov_robust,
            vcov_nuisance_adjusted: vcov_adjusted,
            vcov_fay,
            inference,
            level: cfg.level,
            converged,
            iterations,
            final_eq_norm,
            ps_spec: self.ps_spec.clone(),
            ps_fit: nuisances.ps_fit,
            om_fits: nuisances.om_fits,
            n_weights_floored: ev.n_floored,
            n_weights_truncated: ev.n_truncated,
            warnings,
        })
    }
}

#[derive(Default)]
struct DispersionNotes {
    alpha: Option<String>,
    phi: Option<String>,
}

fn cluster_sums(block: &crate::dataset::ClusterBlock, v: &SubjectValues) -> ClusterSums {
    let arm = block.arm as usize;
    let mut s = ClusterSums {
        arm: block.arm,
        n: block.size(),
        ..Default::default()
    };
    for (j, y) in block.outcomes.iter().enumerate() {
        s.sb[0] += v.b[0][j];
        s.sb[1] += v.b[1][j];
        let Some(y) = *y else { continue };
        let w = v.w[j];
        let sq = w.sqrt();
        s.n_obs += 1;
        s.sy += y;
        s.syy += y * y;
        s.sw += w;
        s.swy += w * y;
        s.ss += sq;
        s.ssy += sq * y;
        s.swb += w * v.b[arm][j];
        s.ssb += sq * v.b[arm][j];
    }
    s
}

pub fn mean_coefficient_names(include_arm: bool) -> Vec<String> {
    let mut v = vec!["(Intercept)".to_string()];
    if include_arm {
        v.push(ARM_TERM.to_string());
    }
    v
}

/// Wald inference for one coefficient under one variance estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inference {
    pub method: VarianceMethod,
    pub coefficient: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub kind: EstimatorKind,
    pub correlation: CorrelationKind,
    pub placement: WeightPlacement,
    pub beta: DVector<f64>,
    pub coefficient_names: Vec<String>,
    /// β_A; absent for an intercept-only mean model.
    pub marginal_effect: Option<f64>,
    pub alpha: f64,
    pub phi: f64,
    pub p_treat: f64,
    pub vcov_robust: Option<DMatrix<f64>>,
    pub vcov_nuisance_adjusted: Option<DMatrix<f64>>,
    pub vcov_fay: Option<DMatrix<f64>>,
    pub inference: Vec<Inference>,
    pub level: f64,
    pub converged: bool,
    pub iterations: usize,
    /// ‖Σ_i Φ_i‖∞ / M at the returned β.
    pub final_eq_norm: f64,
    pub ps_spec: Option<ModelSpec>,
    pub ps_fit: Option<LogisticFit>,
    pub om_fits: Option<OutcomePair>,
    pub n_weights_floored: usize,
    pub n_weights_truncated: usize,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn vcov(&self, method: VarianceMethod) -> Option<&DMatrix<f64>> {
        match method {
            VarianceMethod::Robust => self.vcov_robust.as_ref(),
            VarianceMethod::NuisanceAdjusted => self.vcov_nuisance_adjusted.as_ref(),
            VarianceMethod::Fay => self.vcov_fay.as_ref(),
        }
    }

    /// Standard error of the last mean-model coefficient (β_A when present).
    pub fn effect_se(&self, method: VarianceMethod) -> Option<f64> {
        let k = self.beta.len() - 1;
        self.vcov(method).map(|v| v[(k, k)].max(0.0).sqrt())
    }
}

/// Fits the nuisance models and solves the estimating equations.
pub fn solve(data: &TrialDataset, config: &EstimatorConfig) -> Result<FitResult> {
    let problem = Problem::new(data, config)?;
    let nuisances = problem.fit_nuisances()?;
    problem.solve(nuisances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClusterBlock;
    use approx::assert_relative_eq;

    fn block(id: &str, arm: u8, y: &[Option<f64>], x: &[f64]) -> ClusterBlock {
        ClusterBlock::new(id, arm, y.to_vec(), DMatrix::from_column_slice(x.len(), 1, x)).unwrap()
    }

    fn toy() -> TrialDataset {
        TrialDataset::new(
            vec![
                block("a", 0, &[Some(1.0), Some(2.5), None], &[0.1, 0.7, -0.4]),
                block("b", 1, &[Some(4.0), None, Some(3.2)], &[1.1, -0.2, 0.5]),
                block("c", 0, &[Some(0.5), Some(1.5)], &[-1.0, 0.3]),
                block("d", 1, &[Some(5.0), Some(4.4), Some(2.9)], &[0.9, 0.0, -0.6]),
            ],
            vec!["X1".into()],
        )
        .unwrap()
    }

    #[test]
    fn weights_examples() {
        let a = assemble_weights(&[true, false, true], &[0.5, 0.3, 1e-9], 1e-6, None).unwrap();
        assert_eq!(a.weights[0], 2.0);
        assert_eq!(a.weights[1], 0.0);
        assert_relative_eq!(a.weights[2], 1e6, epsilon = 1e-6);
        assert_eq!(a.n_floored, 1);
        let t = assemble_weights(&[true], &[0.01], 1e-6, Some(10.0)).unwrap();
        assert_eq!((t.weights[0], t.n_truncated), (10.0, 1));
        assert!(assemble_weights(&[true], &[0.0], 0.0, None).is_err());
    }

    #[test]
    fn augmentation_hand_example() {
        let data = TrialDataset::new(
            vec![block("1", 0, &[Some(0.0)], &[0.0]), block("2", 1, &[Some(0.0)], &[0.0])],
            vec!["X1".into()],
        )
        .unwrap();
        let preds = vec![[vec![3.0], vec![5.0]], [vec![3.0], vec![5.0]]];
        let beta = DVector::from_vec(vec![2.0, 2.0]);
        let c = augmentation_residual(&data, &preds, &beta, 0.5, &WorkingCorrelation::independence(), 1.0).unwrap();
        assert_relative_eq!(c[0][0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(c[0][1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn augmentation_vanishes_when_predictions_equal_means() {
        let data = toy();
        let beta = DVector::from_vec(vec![1.3, 0.7]);
        let preds: Vec<[Vec<f64>; 2]> = data
            .clusters()
            .iter()
            .map(|b| [vec![1.3; b.size()], vec![2.0; b.size()]])
            .collect();
        let c = augmentation_residual(&data, &preds, &beta, 0.4, &WorkingCorrelation::exchangeable(0.2), 1.5).unwrap();
        assert!(c.iter().all(|v| v.amax() < 1e-14));
    }

    #[test]
    fn gee_independence_is_arm_mean_difference() {
        let data = toy();
        let fit = solve(&data, &EstimatorConfig::new(EstimatorKind::Gee)).unwrap();
        let mean = |arm: u8| {
            let v: Vec<f64> = data
                .clusters()
                .iter()
                .filter(|b| b.arm == arm)
                .flat_map(|b| b.outcomes.iter().flatten().copied())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(fit.converged);
        assert_relative_eq!(fit.beta[0], mean(0), epsilon = 1e-10);
        assert_relative_eq!(fit.beta[1], mean(1) - mean(0), epsilon = 1e-10);
        assert!(fit.final_eq_norm < 1e-8);
    }

    #[test]
    fn config_requirements() {
        assert!(EstimatorConfig::new(EstimatorKind::Dr).validate().is_err());
        assert!(EstimatorConfig::new(EstimatorKind::Ipw).validate().is_err());
        assert!(EstimatorConfig::new(EstimatorKind::Aug).with_om(ModelSpec::intercept_only()).validate().is_ok());
        assert_eq!("whalf".parse::<WeightPlacement>().unwrap(), WeightPlacement::Whalf);
        assert_eq!("dr".parse::<EstimatorKind>().unwrap(), EstimatorKind::Dr);
    }

    #[test]
    fn placement_warning_reported() {
        let data = toy();
        let cfg = EstimatorConfig::new(EstimatorKind::Ipw)
            .with_ps(ModelSpec::parse("X1").unwrap())
            .with_placement(WeightPlacement::Whalf)
            .with_correlation(CorrelationKind::Exchangeable);
        let fit = solve(&data, &cfg).unwrap();
        assert!(fit.warnings.iter().any(|w| w.contains("consistency")));
    }

    #[test]
    fn singletons_exchangeable_equal_independence() {
        let data = TrialDataset::new(
            (0..6)
                .map(|i| block(&i.to_string(), (i % 2) as u8, &[Some(i as f64 * 0.7 + 1.0)], &[i as f64]))
                .collect(),
            vec!["X1".into()],
        )
        .unwrap();
        let a = solve(&data, &EstimatorConfig::new(EstimatorKind::Gee)).unwrap();
        let b = solve(&data, &EstimatorConfig::new(EstimatorKind::Gee).with_correlation(CorrelationKind::Exchangeable)).unwrap();
        assert!((&a.beta - &b.beta).amax() < 1e-12);
    }
}
