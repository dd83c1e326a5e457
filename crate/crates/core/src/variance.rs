//! Sandwich variance estimators over a stacked system of per-cluster
//! estimating functions: plain robust, nuisance-adjusted and Fay's
//! small-sample correction.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_FAY_Q: f64 = 0.75;
/// Bread matrices with a larger 2-norm condition number are rejected.
pub const MAX_CONDITION: f64 = 1e14;

/// Named parameter blocks of a stacked system; the mean-model block is first.
#[derive(Debug, Clone, PartialEq)]
pub struct StackLayout {
    blocks: Vec<(String, usize)>,
}

impl StackLayout {
    pub fn new(beta_dim: usize) -> Self {
        StackLayout {
            blocks: vec![("beta".to_string(), beta_dim)],
        }
    }

    /// Appends a block; empty blocks are dropped.
    pub fn with_block(mut self, name: &str, dim: usize) -> Self {
        if dim > 0 {
            self.blocks.push((name.to_string(), dim));
        }
        self
    }

    pub fn blocks(&self) -> &[(String, usize)] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|(_, d)| d).sum()
    }

    pub fn beta_dim(&self) -> usize {
        self.blocks[0].1
    }

    pub fn offset(&self, name: &str) -> Option<usize> {
        let mut off = 0;
        for (n, d) in &self.blocks {
            if n == name {
                return Some(off);
            }
            off += d;
        }
        None
    }
}

/// Per-cluster stacked estimating functions U_i and their derivatives ∂U_i/∂Ω.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSystem {
    pub layout: StackLayout,
    pub contributions: Vec<DVector<f64>>,
    pub jacobians: Vec<DMatrix<f64>>,
}

impl StackedSystem {
    pub fn new(
        layout: StackLayout,
        contributions: Vec<DVector<f64>>,
        jacobians: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let d = layout.dim();
        if contributions.len() != jacobians.len() {
            return Err(Error::Dimension(format!(
                "{} contributions but {} jacobians",
                contributions.len(),
                jacobians.len()
            )));
        }
        if contributions.iter().any(|u| u.len() != d)
            || jacobians.iter().any(|j| j.nrows() != d || j.ncols() != d)
        {
            return Err(Error::Dimension(format!("stack entries must have dimension {d}")));
        }
        Ok(StackedSystem {
            layout,
            contributions,
            jacobians,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.contributions.len()
    }

    /// Σ_i ∂U_i/∂Ω.
    pub fn bread(&self) -> DMatrix<f64> {
        let d = self.layout.dim();
        self.jacobians.iter().fold(DMatrix::zeros(d, d), |acc, j| acc + j)
    }

    /// Σ_i U_i U_iᵀ.
    pub fn meat(&self) -> DMatrix<f64> {
        outer_sum(&self.contributions, self.layout.dim())
    }

    pub fn estimating_sum(&self) -> DVector<f64> {
        let d = self.layout.dim();
        self.contributions.iter().fold(DVector::zeros(d), |acc, u| acc + u)
    }
}

fn outer_sum(vs: &[DVector<f64>], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    for v in vs {
        m.ger(1.0, v, v, 1.0);
    }
    m
}

/// Inverse with a condition-number guard.
pub fn checked_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(Error::Singular {
            context: context.to_string(),
            condition,
        });
    }
    m.clone().try_inverse().ok_or_else(|| Error::Singular {
        context: context.to_string(),
        condition,
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn sandwich(bread_inv: &DMatrix<f64>, meat: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(bread_inv * meat * bread_inv.transpose())
}

fn require_clusters(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::Insufficient(format!(
            "sandwich variance needs at least 2 clusters, got {m}"
        )));
    }
    Ok(())
}

/// B⁻¹(Σ Φ_iΦ_iᵀ)B⁻ᵀ with B = Σ ∂Φ_i/∂β.
pub fn robust_sandwich(phis: &[DVector<f64>], bread: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_clusters(phis.len())?;
    let d = bread.nrows();
    if bread.ncols() != d || phis.iter().any(|p| p.len() != d) {
        return Err(Error::Dimension("robust sandwich inputs disagree".into()));
    }
    let inv = checked_inverse(bread, "robust sandwich bread")?;
    Ok(sandwich(&inv, &outer_sum(phis, d)))
}

/// Variance of every stacked parameter together with its mean-model block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedVariance {
    pub full: DMatrix<f64>,
    pub beta: DMatrix<f64>,
}

fn beta_block(layout: &StackLayout, full: &DMatrix<f64>) -> DMatrix<f64> {
    let q = layout.beta_dim();
    full.view((0, 0), (q, q)).into_owned()
}

pub fn nuisance_adjusted(stack: &StackedSystem) -> Result<AdjustedVariance> {
    require_clusters(stack.n_clusters())?;
    let inv = checked_inverse(&stack.bread(), "stacked bread")?;
    let full = sandwich(&inv, &stack.meat());
    Ok(AdjustedVariance {
        beta: beta_block(&stack.layout, &full),
        full,
    })
}

/// [1 − min(q, h)]^(−1/2) with negative leverage treated as 0.
pub fn fay_factor(leverage: f64, q: f64) -> f64 {
    let h = leverage.max(0.0).min(q);
    1.0 / (1.0 - h).sqrt()
}

/// Diagonal entries of H_i for every cluster, from the leverages
/// (∂U_i/∂Ω · (Σ_k ∂U_k/∂Ω)⁻¹)_jj.
pub fn fay_adjustments(stack: &StackedSystem, q: f64) -> Result<Vec<DVector<f64>>> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Config(format!("Fay bound q must lie in [0, 1), got {q}")));
    }
    let inv = checked_inverse(&stack.bread(), "stacked bread")?;
    Ok(stack
        .jacobians
        .iter()
        .map(|j| {
            let lev = j * &inv;
            DVector::from_fn(lev.nrows(), |k, _| fay_factor(lev[(k, k)], q))
        })
        .collect())
}

/// Sandwich with the meat rebuilt from H_iU_i.
pub fn fay_corrected(stack: &StackedSystem, q: f64) -> Result<AdjustedVariance> {
    require_clusters(stack.n_clusters())?;
    let h = fay_adjustments(stack, q)?;
    let adjusted: Vec<DVector<f64>> = stack
        .contributions
        .iter()
        .zip(&h)
        .map(|(u, hd)| u.component_mul(hd))
        .collect();
    let inv = checked_inverse(&stack.bread(), "stacked bread")?;
    let full = sandwich(&inv, &outer_sum(&adjusted, stack.layout.dim()));
    Ok(AdjustedVariance {
        beta: beta_block(&stack.layout, &full),
        full,
    })
}
