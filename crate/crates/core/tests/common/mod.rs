//! Shared fixtures and independent dense-matrix oracles for integration tests.
#![allow(dead_code)]

use drgee::correlation::{v_inverse, WorkingCorrelation};
use drgee::dataset::{ClusterBlock, ModelSpec, TrialDataset};
use drgee::estimator::{EstimatorConfig, EstimatorKind, NuisanceParams, Problem, WeightPlacement};
use drgee::glm::expit;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Small clustered dataset with covariates X1, X2 and MAR missingness.
pub fn random_dataset(seed: u64, m: usize, min_size: usize, max_size: usize) -> TrialDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    let blocks = (0..m)
        .map(|i| {
            let arm = (i % 2) as u8;
            let n = rng.random_range(min_size..=max_size);
            let u: f64 = std.sample(&mut rng) * 0.5;
            let mut x = DMatrix::zeros(n, 2);
            let mut y = Vec::with_capacity(n);
            for j in 0..n {
                let x1: f64 = std.sample(&mut rng);
                let x2: f64 = 1.0 + std.sample(&mut rng);
                x[(j, 0)] = x1;
                x[(j, 1)] = x2;
                let a = f64::from(arm);
                let yv = 1.0 + a + x1 + 0.5 * x2 + 0.7 * a * x1 + u + std.sample(&mut rng);
                let p_obs = expit(1.0 + 0.8 * x1 - 0.5 * a);
                // keep the first subject observed so every cluster contributes
                let observed = j == 0 || rng.random::<f64>() < p_obs;
                y.push(observed.then_some(yv));
            }
            ClusterBlock::new(format!("c{i}"), arm, y, x).unwrap()
        })
        .collect();
    TrialDataset::new(blocks, vec!["X1".into(), "X2".into()]).unwrap()
}

/// Replaces every observed outcome y by f(y).
pub fn map_outcomes(data: &TrialDataset, f: impl Fn(f64) -> f64) -> TrialDataset {
    let blocks = data
        .clusters()
        .iter()
        .map(|b| {
            ClusterBlock::new(
                b.id.clone(),
                b.arm,
                b.outcomes.iter().map(|y| y.map(&f)).collect(),
                b.covariates.clone(),
            )
            .unwrap()
        })
        .collect();
    TrialDataset::new(blocks, data.covariate_names().to_vec()).unwrap()
}

/// Same data with every outcome observed (missing values filled by `fill`).
pub fn complete_outcomes(data: &TrialDataset, fill: f64) -> TrialDataset {
    let blocks = data
        .clusters()
        .iter()
        .map(|b| {
            ClusterBlock::new(
                b.id.clone(),
                b.arm,
                b.outcomes.iter().map(|y| Some(y.unwrap_or(fill))).collect(),
                b.covariates.clone(),
            )
            .unwrap()
        })
        .collect();
    TrialDataset::new(blocks, data.covariate_names().to_vec()).unwrap()
}

pub fn config(kind: EstimatorKind) -> EstimatorConfig {
    let mut c = EstimatorConfig::new(kind);
    if kind.uses_propensity() {
        c = c.with_ps(ModelSpec::parse("X1,X2").unwrap());
    }
    if kind.uses_outcome_model() {
        c = c.with_om(ModelSpec::parse("X1").unwrap());
    }
    c
}

/// Dense evaluation of Σ_i Φ_i(β) built from explicit V⁻¹, W and design matrices.
pub fn dense_estimating_function(
    data: &TrialDataset,
    cfg: &EstimatorConfig,
    params: &NuisanceParams,
    beta: &DVector<f64>,
    corr: &WorkingCorrelation,
    phi: f64,
) -> DVector<f64> {
    let p = cfg.p_treat_override.unwrap_or(data.p_treat());
    let q = beta.len();
    let drow = |a: u8| -> Vec<f64> {
        if q == 2 {
            vec![1.0, f64::from(a)]
        } else {
            vec![1.0]
        }
    };
    let ps = cfg.effective_ps_spec().map(|s| s.resolve(data).unwrap());
    let om = [
        cfg.om_spec0.as_ref().map(|s| s.resolve(data).unwrap()),
        cfg.om_spec1.as_ref().map(|s| s.resolve(data).unwrap()),
    ];
    let mut total = DVector::zeros(q);
    for block in data.clusters() {
        let n = block.size();
        let d = DMatrix::from_fn(n, q, |_, c| drow(block.arm)[c]);
        let mu = &d * beta;
        let b: Vec<DVector<f64>> = (0..2u8)
            .map(|a| match (&om[a as usize], &params.eta_b[a as usize]) {
                (Some(r), Some(eta)) => r.cluster_design(block, a) * eta,
                _ => DVector::zeros(n),
            })
            .collect();
        let kind = cfg.kind;
        if matches!(kind, EstimatorKind::Gee | EstimatorKind::Aug) {
            let obs: Vec<usize> = (0..n).filter(|&j| block.outcomes[j].is_some()).collect();
            if !obs.is_empty() {
                let vinv = v_inverse(obs.len(), corr, phi).unwrap();
                let d_o = d.select_rows(obs.iter());
                let r = DVector::from_iterator(obs.len(), obs.iter().map(|&j| block.outcomes[j].unwrap() - mu[j]));
                total += d_o.transpose() * vinv * r;
            }
            if kind == EstimatorKind::Aug {
                let vinv = v_inverse(n, corr, phi).unwrap();
                total -= d.transpose() * vinv * (&b[block.arm as usize] - &mu);
            }
        } else {
            let x = ps.as_ref().unwrap().cluster_design(block, block.arm);
            let lin = x * params.eta_w.as_ref().unwrap();
            let w = DVector::from_fn(n, |j, _| match block.outcomes[j] {
                Some(_) => {
                    let pi = expit(lin[j]).clamp(1e-15, 1.0 - 1e-15).max(cfg.pi_floor);
                    let w = 1.0 / pi;
                    cfg.truncation.map_or(w, |t| w.min(t))
                }
                None => 0.0,
            });
            let r = DVector::from_fn(n, |j, _| match block.outcomes[j] {
                Some(y) if kind == EstimatorKind::Ipw => y - mu[j],
                Some(y) => y - b[block.arm as usize][j],
                None => 0.0,
            });
            let vinv = v_inverse(n, corr, phi).unwrap();
            let wm = DMatrix::from_diagonal(&w);
            let wh = DMatrix::from_diagonal(&w.map(f64::sqrt));
            let core = match cfg.placement {
                WeightPlacement::VinvW => vinv * wm,
                WeightPlacement::Whalf => &wh * vinv * &wh,
            };
            total += d.transpose() * core * r;
        }
        if kind.uses_outcome_model() {
            let vinv = v_inverse(n, corr, phi).unwrap();
            for a in 0..2u8 {
                let da = DMatrix::from_fn(n, q, |_, c| drow(a)[c]);
                let pa = if a == 1 { p } else { 1.0 - p };
                total += da.transpose() * &vinv * (&b[a as usize] - &da * beta) * pa;
            }
        }
    }
    total
}

/// Solves the (linear) dense system Σ Φ_i(β) = 0 at fixed α and φ.
pub fn dense_solve(
    data: &TrialDataset,
    cfg: &EstimatorConfig,
    params: &NuisanceParams,
    corr: &WorkingCorrelation,
    phi: f64,
) -> DVector<f64> {
    let q = cfg.mean_dim();
    let f0 = dense_estimating_function(data, cfg, params, &DVector::zeros(q), corr, phi);
    let mut jac = DMatrix::zeros(q, q);
    for k in 0..q {
        let mut e = DVector::zeros(q);
        e[k] = 1.0;
        let fk = dense_estimating_function(data, cfg, params, &e, corr, phi);
        jac.set_column(k, &(fk - &f0));
    }
    -jac.lu().solve(&f0).unwrap()
}

pub const KINDS: [EstimatorKind; 4] = [EstimatorKind::Gee, EstimatorKind::Ipw, EstimatorKind::Aug, EstimatorKind::Dr];
pub const PLACEMENTS: [WeightPlacement; 2] = [WeightPlacement::VinvW, WeightPlacement::Whalf];

/// Central finite differences of Σ_i U_i(Ω) against the analytic Σ_i ∂U_i/∂Ω.
pub fn finite_difference_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let data = random_dataset(seed, 6 + (seed % 5) as usize, 2, 6);
    let mut worst: f64 = 0.0;
    for kind in KINDS {
        for placement in PLACEMENTS {
            let cfg = config(kind).with_placement(placement);
            let problem = Problem::new(&data, &cfg).unwrap();
            let nuis = problem.fit_nuisances().unwrap();
            for corr in [WorkingCorrelation::independence(), WorkingCorrelation::exchangeable(0.25)] {
                let beta = DVector::from_fn(2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
                let phi = 0.5 + rng.random::<f64>();
                let ev = problem.evaluate(&nuis.params).unwrap();
                let stack = problem.stack(&ev, &beta, &nuis.params, &corr, phi).unwrap();
                let analytic = stack.bread();
                let omega = problem.omega(&beta, &nuis.params);
                let dim = omega.len();
                let mut fd = DMatrix::zeros(dim, dim);
                for k in 0..dim {
                    let h = 1e-6 * omega[k].abs().max(1.0);
                    let mut up = omega.clone();
                    up[k] += h;
                    let mut dn = omega.clone();
                    dn[k] -= h;
                    let su: DVector<f64> = problem
                        .stacked_contributions(&up, nuis.params.sigma2, &corr, phi)
                        .unwrap()
                        .iter()
                        .sum();
                    let sd: DVector<f64> = problem
                        .stacked_contributions(&dn, nuis.params.sigma2, &corr, phi)
                        .unwrap()
                        .iter()
                        .sum();
                    fd.set_column(k, &((su - sd) / (2.0 * h)));
                }
                for c in 0..dim {
                    let col_scale = analytic.column(c).amax().max(fd.column(c).amax()).max(1e-12);
                    for r in 0..dim {
                        let an = analytic[(r, c)];
                        let denom = an.abs().max(1e-3 * col_scale);
                        worst = worst.max((fd[(r, c)] - an).abs() / denom);
                    }
                }
            }
        }
    }
    worst
}

