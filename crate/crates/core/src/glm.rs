//! Nuisance models: logistic regression for the observation propensity and
//! per-arm linear regression for the outcome model, with cluster-aggregated
//! scores and stepwise AIC selection.

use nalgebra::{DMatrix, DVector};

use crate::dataset::{design_matrix, observed_vector, outcome_vector, ModelSpec, Term, TrialDataset};
use crate::error::{Error, Result};

/// Score max-norm at which IRLS stops.
pub const LOGISTIC_TOL: f64 = 1e-8;
pub const LOGISTIC_MAX_ITER: usize = 100;
pub const MAX_STEP_HALVINGS: usize = 20;
/// |linear predictor| above which a fit is flagged as (quasi-)separated.
pub const SEPARATION_THRESHOLD: f64 = 30.0;
const PROB_EPS: f64 = 1e-15;
const RANK_TOL: f64 = 1e-10;

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Householder QR with a rank check on the diagonal of R.
fn checked_qr(x: &DMatrix<f64>) -> Result<nalgebra::linalg::QR<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let k = x.ncols();
    if x.nrows() < k {
        return Err(Error::Insufficient(format!(
            "{} rows for {} design columns",
            x.nrows(),
            k
        )));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    for j in 0..k {
        let norm = x.column(j).norm();
        if r[(j, j)].abs() <= RANK_TOL * norm.max(f64::MIN_POSITIVE) {
            return Err(Error::RankDeficient {
                index: j,
                column: None,
            });
        }
    }
    Ok(qr)
}

/// Least-squares fit of a Gaussian identity-link model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coefficients: DVector<f64>,
    /// RSS / (n − k); zero when n = k.
    pub residual_variance: f64,
    pub rss: f64,
    pub n_obs: usize,
}

impl LinearFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        row.iter().zip(self.coefficients.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn n_params(&self) -> usize {
        self.coefficients.len()
    }

    /// n·log(RSS/n) + 2(k+1).
    pub fn aic(&self) -> f64 {
        let n = self.n_obs as f64;
        let rss = self.rss.max(f64::MIN_POSITIVE);
        n * (rss / n).ln() + 2.0 * (self.n_params() as f64 + 1.0)
    }
}

pub fn fit_linear(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<LinearFit> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "design has {} rows, response has {}",
            x.nrows(),
            y.len()
        )));
    }
    let qr = checked_qr(x)?;
    let k = x.ncols();
    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    let r = qr.r();
    let coefficients = r
        .solve_upper_triangular(&qty.rows(0, k).into_owned())
        .ok_or_else(|| Error::Singular {
            context: "least squares".into(),
            condition: f64::INFINITY,
        })?;
    let resid = y - x * &coefficients;
    let rss = resid.norm_squared();
    let n = x.nrows();
    Ok(LinearFit {
        coefficients,
        residual_variance: if n > k { rss / (n - k) as f64 } else { 0.0 },
        rss,
        n_obs: n,
    })
}

/// Maximum-likelihood Bernoulli-logit fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coefficients: DVector<f64>,
    pub fitted_probabilities: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Log-likelihood after each accepted IRLS step, starting value first.
    pub log_likelihood_path: Vec<f64>,
    pub separation: bool,
    pub n_obs: usize,
}

impl LogisticFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let eta: f64 = row.iter().zip(self.coefficients.iter()).map(|(a, b)| a * b).sum();
        clamp_prob(expit(eta))
    }

    /// −2ℓ + 2k.
    pub fn aic(&self) -> f64 {
        -2.0 * self.log_likelihood + 2.0 * self.coefficients.len() as f64
    }
}

fn bernoulli_loglik(eta: &DVector<f64>, r: &[f64]) -> f64 {
    eta.iter().zip(r).map(|(&e, &ri)| ri * e - softplus(e)).sum()
}

/// IRLS with step-halving on log-likelihood decrease.
pub fn fit_logistic(x: &DMatrix<f64>, r: &[f64]) -> Result<LogisticFit> {
    if x.nrows() != r.len() {
        return Err(Error::Dimension(format!(
            "design has {} rows, response has {}",
            x.nrows(),
            r.len()
        )));
    }
    if let Some(v) = r.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!("binary response contains {v}")));
    }
    let ones = r.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 {
        return Err(Error::SingleClass(0));
    }
    if ones == r.len() {
        return Err(Error::SingleClass(1));
    }
    checked_qr(x)?;

    let k = x.ncols();
    let n = x.nrows();
    let mut beta = DVector::zeros(k);
    let mut eta = x * &beta;
    let mut ll = bernoulli_loglik(&eta, r);
    let mut path = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut scaled = x.clone();
    while iterations < LOGISTIC_MAX_ITER {
        let p: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let resid = DVector::from_iterator(n, r.iter().zip(&p).map(|(ri, pi)| ri - pi));
        let score = x.tr_mul(&resid);
        let small = score.amax() < LOGISTIC_TOL;
        for (i, pi) in p.iter().enumerate() {
            let s = (pi * (1.0 - pi)).sqrt();
            for c in 0..k {
                scaled[(i, c)] = x[(i, c)] * s;
            }
        }
        let info = scaled.tr_mul(&scaled);
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&score),
            None => match info.lu().solve(&score) {
                Some(s) => s,
                None => break,
            },
        };
        if small {
            // one polishing step makes the result insensitive to where the tolerance was crossed
            let cand = &beta + &step;
            let cand_eta = x * &cand;
            let cand_ll = bernoulli_loglik(&cand_eta, r);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * (1.0 + ll.abs()) {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                path.push(ll);
            }
            converged = true;
            break;
        }
        // below this expected gain, likelihood comparisons are rounding noise
        let negligible = step.dot(&score) < 1e-13 * (1.0 + ll.abs());
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_STEP_HALVINGS {
            let cand = &beta + &step * t;
            let cand_eta = x * &cand;
            let cand_ll = bernoulli_loglik(&cand_eta, r);
            if cand_ll.is_finite() && (cand_ll >= ll || negligible) {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
        path.push(ll);
    }
    if !converged {
        let p: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let resid = DVector::from_iterator(n, r.iter().zip(&p).map(|(ri, pi)| ri - pi));
        converged = x.tr_mul(&resid).amax() < LOGISTIC_TOL;
    }
    let separation = eta.iter().any(|e| e.abs() > SEPARATION_THRESHOLD);
    Ok(LogisticFit {
        fitted_probabilities: eta.iter().map(|&e| clamp_prob(expit(e))).collect(),
        coefficients: beta,
        converged,
        iterations,
        log_likelihood: ll,
        log_likelihood_path: path,
        separation,
        n_obs: n,
    })
}

fn check_groups(rows: usize, groups: &[usize], n_groups: usize) -> Result<()> {
    if groups.len() != rows {
        return Err(Error::Dimension(format!(
            "{} group labels for {rows} rows",
            groups.len()
        )));
    }
    if let Some(g) = groups.iter().find(|&&g| g >= n_groups) {
        return Err(Error::Dimension(format!("group label {g} ≥ {n_groups}")));
    }
    Ok(())
}

/// Per-cluster logistic scores Σ_j x_ij (r_ij − π_ij) at coefficients `eta`.
pub fn score_logistic(
    x: &DMatrix<f64>,
    r: &[f64],
    eta: &DVector<f64>,
    groups: &[usize],
    n_groups: usize,
) -> Result<Vec<DVector<f64>>> {
    if x.nrows() != r.len() || x.ncols() != eta.len() {
        return Err(Error::Dimension("logistic score inputs disagree".into()));
    }
    check_groups(x.nrows(), groups, n_groups)?;
    let mut out = vec![DVector::zeros(x.ncols()); n_groups];
    let lin = x * eta;
    for (i, &g) in groups.iter().enumerate() {
        let resid = r[i] - expit(lin[i]);
        out[g].axpy(resid, &x.row(i).transpose(), 1.0);
    }
    Ok(out)
}

/// Per-cluster least-squares scores Σ_j x_ij (y_ij − x_ij η) / σ².
pub fn score_linear(
    x: &DMatrix<f64>,
    y: &[f64],
    eta: &DVector<f64>,
    sigma2: f64,
    groups: &[usize],
    n_groups: usize,
) -> Result<Vec<DVector<f64>>> {
    if x.nrows() != y.len() || x.ncols() != eta.len() {
        return Err(Error::Dimension("linear score inputs disagree".into()));
    }
    check_groups(x.nrows(), groups, n_groups)?;
    let mut out = vec![DVector::zeros(x.ncols()); n_groups];
    let lin = x * eta;
    for (i, &g) in groups.iter().enumerate() {
        let resid = (y[i] - lin[i]) / sigma2;
        out[g].axpy(resid, &x.row(i).transpose(), 1.0);
    }
    Ok(out)
}

/// Per-arm outcome regressions B(X, a).
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomePair {
    pub fit0: LinearFit,
    pub fit1: LinearFit,
    pub spec0: ModelSpec,
    pub spec1: ModelSpec,
}

impl OutcomePair {
    pub fn fit(&self, arm: u8) -> &LinearFit {
        if arm == 0 {
            &self.fit0
        } else {
            &self.fit1
        }
    }

    pub fn spec(&self, arm: u8) -> &ModelSpec {
        if arm == 0 {
            &self.spec0
        } else {
            &self.spec1
        }
    }
}

/// Fits arm `arm`'s outcome model on its observed rows.
pub fn fit_outcome_model(data: &TrialDataset, spec: &ModelSpec, arm: u8) -> Result<LinearFit> {
    let (x, rows) = design_matrix(data, spec, Some(arm), true)?;
    let y = DVector::from_vec(outcome_vector(data, &rows));
    fit_linear(&x, &y).map_err(|e| e.with_column_names(&spec.column_names()))
}

pub fn fit_outcome_pair(data: &TrialDataset, spec0: &ModelSpec, spec1: &ModelSpec) -> Result<OutcomePair> {
    Ok(OutcomePair {
        fit0: fit_outcome_model(data, spec0, 0)?,
        fit1: fit_outcome_model(data, spec1, 1)?,
        spec0: spec0.clone(),
        spec1: spec1.clone(),
    })
}

/// Fits the observation propensity on every subject (response R_ij).
pub fn fit_propensity(data: &TrialDataset, spec: &ModelSpec) -> Result<LogisticFit> {
    let (x, rows) = design_matrix(data, spec, None, false)?;
    let r = observed_vector(data, &rows);
    fit_logistic(&x, &r).map_err(|e| e.with_column_names(&spec.column_names()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Linear,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepDirection {
    Forward,
    /// Forward additions with backward drops considered at every step.
    #[default]
    Both,
}

/// Outcome of a stepwise search.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Selected candidate indices, in declaration order.
    pub included: Vec<usize>,
    pub aic: f64,
    pub steps: usize,
    pub warnings: Vec<String>,
}

fn model_aic(
    candidates: &DMatrix<f64>,
    included: &[usize],
    response: &[f64],
    family: Family,
) -> Result<f64> {
    let n = candidates.nrows();
    let mut x = DMatrix::zeros(n, included.len() + 1);
    x.column_mut(0).fill(1.0);
    for (c, &idx) in included.iter().enumerate() {
        x.column_mut(c + 1).copy_from(&candidates.column(idx));
    }
    match family {
        Family::Linear => {
            let y = DVector::from_column_slice(response);
            Ok(fit_linear(&x, &y)?.aic())
        }
        Family::Logistic => Ok(fit_logistic(&x, response)?.aic()),
    }
}

/// Greedy AIC search from the intercept-only model. Each step applies the
/// single add (or drop, unless forward-only) with the lowest AIC; the search
/// stops when no move lowers AIC. Ties go to the earliest candidate.
pub fn stepwise_aic(
    names: &[String],
    candidates: &DMatrix<f64>,
    response: &[f64],
    family: Family,
    direction: StepDirection,
) -> Result<Selection> {
    if names.len() != candidates.ncols() {
        return Err(Error::Dimension(format!(
            "{} candidate names for {} columns",
            names.len(),
            candidates.ncols()
        )));
    }
    if candidates.nrows() != response.len() {
        return Err(Error::Dimension("candidate rows and response disagree".into()));
    }
    let mut included: Vec<usize> = Vec::new();
    let mut current = model_aic(candidates, &included, response, family)?;
    let mut warnings = Vec::new();
    let mut steps = 0;
    // Each accepted move strictly lowers AIC, so the search terminates; the cap is a backstop.
    let max_steps = 4 * names.len() + 4;
    while steps < max_steps {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for idx in 0..names.len() {
            let trial: Vec<usize> = if included.contains(&idx) {
                if direction == StepDirection::Forward {
                    continue;
                }
                included.iter().copied().filter(|&i| i != idx).collect()
            } else {
                let mut t = included.clone();
                t.push(idx);
                t.sort_unstable();
                t
            };
            match model_aic(candidates, &trial, response, family) {
                Ok(aic) if aic.is_finite() => {
                    if best.as_ref().is_none_or(|(b, _)| aic < *b) {
                        best = Some((aic, trial));
                    }
                }
                Ok(_) => {}
                Err(e) => {
                    let verb = if included.contains(&idx) { "dropping" } else { "adding" };
                    warnings.push(format!("skipped {verb} '{}': {e}", names[idx]));
                }
            }
        }
        match best {
            Some((aic, trial)) if aic < current - 1e-10 * current.abs().max(1.0) => {
                included = trial;
                current = aic;
                steps += 1;
            }
            _ => break,
        }
    }
    Ok(Selection {
        included,
        aic: current,
        steps,
        warnings,
    })
}

fn candidate_block(data: &TrialDataset, candidates: &[Term], arm: Option<u8>, observed_only: bool)
    -> Result<(DMatrix<f64>, Vec<crate::dataset::RowRef>)> {
    let spec = ModelSpec::new(candidates.to_vec())?;
    let (x, rows) = design_matrix(data, &spec, arm, observed_only)?;
    let cols = x.ncols() - 1;
    Ok((x.columns(1, cols).into_owned(), rows))
}

fn selected_spec(candidates: &[Term], selection: &Selection) -> Result<ModelSpec> {
    ModelSpec::new(selection.included.iter().map(|&i| candidates[i].clone()).collect())
}

/// Stepwise logistic selection of the propensity model over all subjects.
pub fn select_propensity(
    data: &TrialDataset,
    candidates: &[Term],
    direction: StepDirection,
) -> Result<(ModelSpec, Selection)> {
    let (block, rows) = candidate_block(data, candidates, None, false)?;
    let r = observed_vector(data, &rows);
    let names: Vec<String> = candidates.iter().map(Term::to_string).collect();
    let sel = stepwise_aic(&names, &block, &r, Family::Logistic, direction)?;
    Ok((selected_spec(candidates, &sel)?, sel))
}

/// Stepwise linear selection of arm `arm`'s outcome model over its observed subjects.
pub fn select_outcome(
    data: &TrialDataset,
    arm: u8,
    candidates: &[Term],
    direction: StepDirection,
) -> Result<(ModelSpec, Selection)> {
    let (block, rows) = candidate_block(data, candidates, Some(arm), true)?;
    let y = outcome_vector(data, &rows);
    let names: Vec<String> = candidates.iter().map(Term::to_string).collect();
    let sel = stepwise_aic(&names, &block, &y, Family::Linear, direction)?;
    Ok((selected_spec(candidates, &sel)?, sel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn linear_intercept_only_mean_and_variance() {
        let fit = fit_linear(&mat(&[&[1.0], &[1.0], &[1.0]]), &DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert_relative_eq!(fit.coefficients[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(fit.residual_variance, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn linear_exact_line() {
        let x = mat(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 2.0]]);
        let fit = fit_linear(&x, &DVector::from_vec(vec![0.0, 1.0, 2.0])).unwrap();
        assert!(fit.coefficients[0].abs() < 1e-12);
        assert_relative_eq!(fit.coefficients[1], 1.0, epsilon = 1e-12);
        assert!(fit.rss < 1e-24);
    }

    #[test]
    fn linear_duplicate_column_rank_error() {
        let x = mat(&[&[1.0, 2.0, 2.0], &[1.0, 3.0, 3.0], &[1.0, 5.0, 5.0], &[1.0, 1.0, 1.0]]);
        let err = fit_linear(&x, &DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0])).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { index: 2, .. }), "{err}");
    }

    #[test]
    fn linear_predictions_invariant_to_affine_covariate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 40;
        let x1: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y = DVector::from_iterator(n, x1.iter().map(|v| 1.0 + 2.0 * v + rng.random::<f64>()));
        let xa = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x1[i] });
        let xb = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { -3.5 * x1[i] + 7.0 });
        let fa = &xa * fit_linear(&xa, &y).unwrap().coefficients;
        let fb = &xb * fit_linear(&xb, &y).unwrap().coefficients;
        assert!((fa - fb).amax() < 1e-10);
    }

    #[test]
    fn logistic_intercept_only_balanced() {
        let fit = fit_logistic(&mat(&[&[1.0], &[1.0]]), &[0.0, 1.0]).unwrap();
        assert!(fit.coefficients[0].abs() < 1e-12);
        assert!(fit.fitted_probabilities.iter().all(|&p| (p - 0.5).abs() < 1e-12));
        assert!(fit.converged && !fit.separation);
    }

    #[test]
    fn logistic_single_class_rejected() {
        assert!(matches!(
            fit_logistic(&mat(&[&[1.0], &[1.0]]), &[1.0, 1.0]).unwrap_err(),
            Error::SingleClass(1)
        ));
    }

    #[test]
    fn logistic_separation_flagged() {
        let x = mat(&[&[1.0, -1.0], &[1.0, 0.0], &[1.0, 1.0], &[1.0, 2.0]]);
        let fit = fit_logistic(&x, &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(fit.separation);
        assert!(fit.fitted_probabilities.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    /// Coarse-to-fine grid search over (b0, b1) maximizing the Bernoulli log-likelihood.
    fn grid_logistic(xs: &[f64], r: &[f64]) -> (f64, f64) {
        let ll = |b0: f64, b1: f64| -> f64 {
            xs.iter()
                .zip(r)
                .map(|(&x, &ri)| {
                    let e = b0 + b1 * x;
                    ri * e - (1.0 + e.exp()).ln()
                })
                .sum()
        };
        let (mut c0, mut c1, mut half) = (0.0, 0.0, 8.0);
        while half > 1e-7 {
            let mut best = (f64::NEG_INFINITY, c0, c1);
            for i in -20..=20 {
                for j in -20..=20 {
                    let b0 = c0 + half * i as f64 / 20.0;
                    let b1 = c1 + half * j as f64 / 20.0;
                    let v = ll(b0, b1);
                    if v > best.0 {
                        best = (v, b0, b1);
                    }
                }
            }
            c0 = best.1;
            c1 = best.2;
            half /= 4.0;
        }
        (c0, c1)
    }

    #[test]
    fn logistic_matches_grid_oracle() {
        let xs = [-1.0, 0.0, 1.0, 2.0];
        let r = [0.0, 1.0, 0.0, 1.0];
        let x = DMatrix::from_fn(4, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let fit = fit_logistic(&x, &r).unwrap();
        let (g0, g1) = grid_logistic(&xs, &r);
        assert!((fit.coefficients[0] - g0).abs() < 1e-4, "{} vs {g0}", fit.coefficients[0]);
        assert!((fit.coefficients[1] - g1).abs() < 1e-4, "{} vs {g1}", fit.coefficients[1]);
    }

    #[test]
    fn logistic_loglik_nondecreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 300;
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) });
        let r: Vec<f64> = (0..n)
            .map(|i| {
                let p = expit(-0.5 + 1.5 * x[(i, 1)] - x[(i, 2)]);
                if rng.random::<f64>() < p { 1.0 } else { 0.0 }
            })
            .collect();
        let fit = fit_logistic(&x, &r).unwrap();
        assert!(fit.converged);
        // non-decreasing up to floating-point resolution
        assert!(fit
            .log_likelihood_path
            .windows(2)
            .all(|w| w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs())));
    }

    #[test]
    fn scores_vanish_at_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 60;
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { StandardNormal.sample(&mut rng) });
        let groups: Vec<usize> = (0..n).map(|i| i / 6).collect();
        let r: Vec<f64> = (0..n).map(|i| if expit(x[(i, 1)]) > rng.random::<f64>() { 1.0 } else { 0.0 }).collect();
        let lf = fit_logistic(&x, &r).unwrap();
        let s = score_logistic(&x, &r, &lf.coefficients, &groups, 10).unwrap();
        let total = s.iter().fold(DVector::zeros(2), |acc, v| acc + v);
        assert!(total.amax() < 1e-8);

        let y: Vec<f64> = (0..n).map(|i| 1.0 + x[(i, 1)] + rng.random::<f64>()).collect();
        let yf = fit_linear(&x, &DVector::from_vec(y.clone())).unwrap();
        let s = score_linear(&x, &y, &yf.coefficients, yf.residual_variance, &groups, 10).unwrap();
        let total = s.iter().fold(DVector::zeros(2), |acc, v| acc + v);
        assert!(total.amax() < 1e-8);
    }

    #[test]
    fn logistic_score_hand_values() {
        let x = mat(&[&[1.0], &[1.0], &[1.0], &[1.0]]);
        let s = score_logistic(&x, &[1.0, 1.0, 0.0, 0.0], &DVector::from_vec(vec![0.0]), &[0; 4], 1).unwrap();
        assert_eq!(s[0][0], 0.0);

        let s = score_logistic(&x, &[1.0, 1.0, 0.0, 0.0], &DVector::from_vec(vec![0.5]), &[0; 4], 1).unwrap();
        let pi = 0.622_459_331_201_854_6; // expit(0.5)
        assert_relative_eq!(s[0][0], 2.0 - 4.0 * pi, epsilon = 1e-12);
    }

    #[test]
    fn scores_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let n = 25;
            let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { StandardNormal.sample(&mut rng) });
            let r: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect();
            let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eta = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
            let sigma2 = 1.7;
            let loglik = |b: &DVector<f64>| bernoulli_loglik(&(&x * b), &r);
            let ls = |b: &DVector<f64>| -(DVector::from_vec(y.clone()) - &x * b).norm_squared() / (2.0 * sigma2);
            let sl = score_logistic(&x, &r, &eta, &vec![0; n], 1).unwrap().remove(0);
            let sn = score_linear(&x, &y, &eta, sigma2, &vec![0; n], 1).unwrap().remove(0);
            for k in 0..3 {
                let h = 1e-5;
                let mut up = eta.clone();
                up[k] += h;
                let mut dn = eta.clone();
                dn[k] -= h;
                let fd_l = (loglik(&up) - loglik(&dn)) / (2.0 * h);
                let fd_n = (ls(&up) - ls(&dn)) / (2.0 * h);
                assert!((fd_l - sl[k]).abs() <= 1e-6 * sl[k].abs().max(1.0));
                assert!((fd_n - sn[k]).abs() <= 1e-6 * sn[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn stepwise_empty_candidates() {
        let cands = DMatrix::zeros(5, 0);
        let sel = stepwise_aic(&[], &cands, &[1.0, 2.0, 3.0, 2.0, 1.0], Family::Linear, StepDirection::Both).unwrap();
        assert!(sel.included.is_empty());
    }

    fn synthetic(n: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cands = DMatrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 * cands[(i, 0)] + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        (cands, y)
    }

    #[test]
    fn stepwise_duplicate_candidate_never_added() {
        let (c, y) = synthetic(100, 5);
        let dup = DMatrix::from_fn(100, 2, |i, _| c[(i, 0)]);
        let names = vec!["X1".to_string(), "X1copy".to_string()];
        let sel = stepwise_aic(&names, &dup, &y, Family::Linear, StepDirection::Both).unwrap();
        assert_eq!(sel.included, vec![0]);
        assert!(!sel.warnings.is_empty());
    }

    #[test]
    fn stepwise_against_exhaustive_subsets() {
        let (c, y) = synthetic(200, 7);
        let names: Vec<String> = ["X1", "X2", "X3"].iter().map(|s| s.to_string()).collect();
        let sel = stepwise_aic(&names, &c, &y, Family::Linear, StepDirection::Both).unwrap();
        let mut best = f64::INFINITY;
        for mask in 0..8u32 {
            let subset: Vec<usize> = (0..3).filter(|k| mask & (1 << k) != 0).collect();
            best = best.min(model_aic(&c, &subset, &y, Family::Linear).unwrap());
        }
        let null = model_aic(&c, &[], &y, Family::Linear).unwrap();
        assert!(sel.included.contains(&0));
        assert!(sel.aic <= null);
        // the greedy path reaches the exhaustive optimum on this instance
        assert_relative_eq!(sel.aic, best, epsilon = 1e-9);
    }

    #[test]
    fn stepwise_invariant_to_row_order() {
        let (c, y) = synthetic(150, 9);
        let names: Vec<String> = ["X1", "X2", "X3"].iter().map(|s| s.to_string()).collect();
        let sel = stepwise_aic(&names, &c, &y, Family::Linear, StepDirection::Both).unwrap();
        let perm: Vec<usize> = (0..150).rev().collect();
        let c2 = DMatrix::from_fn(150, 3, |i, j| c[(perm[i], j)]);
        let y2: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let sel2 = stepwise_aic(&names, &c2, &y2, Family::Linear, StepDirection::Both).unwrap();
        assert_eq!(sel.included, sel2.included);

        let r: Vec<f64> = y.iter().map(|v| if *v > 0.3 { 1.0 } else { 0.0 }).collect();
        let r2: Vec<f64> = perm.iter().map(|&i| r[i]).collect();
        let a = stepwise_aic(&names, &c, &r, Family::Logistic, StepDirection::Both).unwrap();
        let b = stepwise_aic(&names, &c2, &r2, Family::Logistic, StepDirection::Both).unwrap();
        assert_eq!(a.included, b.included);
        assert!(a.included.contains(&0));
    }
}
