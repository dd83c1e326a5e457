//! Working correlation structures and moment estimators for the dispersion
//! and exchangeable correlation parameters.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the dispersion estimate.
pub const PHI_FLOOR: f64 = 1e-10;
/// Margin kept between a clamped α and the boundary of its valid range.
pub const ALPHA_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    #[default]
    Independence,
    Exchangeable,
}

impl CorrelationKind {
    /// Single-letter suffix used in summary tables.
    pub fn suffix(self) -> &'static str {
        match self {
            CorrelationKind::Independence => "I",
            CorrelationKind::Exchangeable => "E",
        }
    }
}

impl std::str::FromStr for CorrelationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "independence" | "ind" | "i" => Ok(CorrelationKind::Independence),
            "exchangeable" | "exch" | "e" => Ok(CorrelationKind::Exchangeable),
            other => Err(Error::Config(format!("unknown correlation structure '{other}'"))),
        }
    }
}

impl std::fmt::Display for CorrelationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorrelationKind::Independence => "independence",
            CorrelationKind::Exchangeable => "exchangeable",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkingCorrelation {
    pub kind: CorrelationKind,
    /// Always 0 for independence.
    pub alpha: f64,
}

impl WorkingCorrelation {
    pub fn independence() -> Self {
        WorkingCorrelation {
            kind: CorrelationKind::Independence,
            alpha: 0.0,
        }
    }

    pub fn exchangeable(alpha: f64) -> Self {
        WorkingCorrelation {
            kind: CorrelationKind::Exchangeable,
            alpha,
        }
    }

    /// Scalars (a, c) with C(α)⁻¹ = a·[I − c·J] for a block of size n.
    pub fn inverse_factors(&self, n: usize) -> Result<(f64, f64)> {
        let alpha = self.alpha;
        if self.kind == CorrelationKind::Independence || alpha == 0.0 || n <= 1 {
            return Ok((1.0, 0.0));
        }
        let denom = 1.0 + (n as f64 - 1.0) * alpha;
        if denom <= 0.0 || alpha >= 1.0 {
            return Err(Error::Singular {
                context: format!("exchangeable correlation with alpha {alpha} at cluster size {n}"),
                condition: f64::INFINITY,
            });
        }
        Ok((1.0 / (1.0 - alpha), alpha / denom))
    }

    /// 1ᵀC⁻¹1 / n, i.e. 1/(1 + (n−1)α).
    pub fn row_sum_factor(&self, n: usize) -> Result<f64> {
        let (a, c) = self.inverse_factors(n)?;
        Ok(a * (1.0 - c * n as f64))
    }

    /// The n×n matrix C(α).
    pub fn matrix(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { self.alpha })
    }
}

/// V⁻¹ = (1/φ)·C(α)⁻¹ in closed form.
pub fn v_inverse(n: usize, corr: &WorkingCorrelation, phi: f64) -> Result<DMatrix<f64>> {
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::Validation(format!("dispersion must be positive, got {phi}")));
    }
    let (a, c) = corr.inverse_factors(n)?;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        a * (id - c) / phi
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersionState {
    pub phi: f64,
}

/// φ̂ = Σe²/(N − k), floored at [`PHI_FLOOR`]. The second value carries a
/// warning when the floor is applied.
pub fn estimate_phi(residuals: &[Vec<f64>], k: usize) -> Result<(DispersionState, Option<String>)> {
    let (ss, n) = residuals
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, c), e| (s + e * e, c + 1));
    phi_from_sums(ss, n, k)
}

pub(crate) fn phi_from_sums(ss: f64, n: usize, k: usize) -> Result<(DispersionState, Option<String>)> {
    if n <= k {
        return Err(Error::Insufficient(format!(
            "{n} residuals for {k} mean parameters"
        )));
    }
    let phi = ss / (n - k) as f64;
    if !(phi >= PHI_FLOOR) {
        return Ok((
            DispersionState { phi: PHI_FLOOR },
            Some(format!("dispersion estimate {phi:.3e} floored at {PHI_FLOOR:e}")),
        ));
    }
    Ok((DispersionState { phi }, None))
}

/// α̂ = [Σ_i Σ_{j<l} e_ij e_il / φ] / [Σ_i n_i(n_i−1)/2 − k], clamped into
/// the range valid for clusters up to `n_max` subjects. When the pair count
/// does not exceed k the correction is dropped.
pub fn estimate_alpha_exchangeable(
    residuals: &[Vec<f64>],
    phi: f64,
    k: usize,
    n_max: usize,
) -> Result<(f64, Option<String>)> {
    let mut cross = 0.0;
    let mut pairs = 0usize;
    for e in residuals {
        let n = e.len();
        let s: f64 = e.iter().sum();
        let ss: f64 = e.iter().map(|v| v * v).sum();
        cross += (s * s - ss) / 2.0;
        pairs += n * n.saturating_sub(1) / 2;
    }
    alpha_from_sums(cross, pairs, phi, k, n_max)
}

pub(crate) fn alpha_from_sums(
    cross: f64,
    pairs: usize,
    phi: f64,
    k: usize,
    n_max: usize,
) -> Result<(f64, Option<String>)> {
    if pairs == 0 {
        return Err(Error::Insufficient(
            "exchangeable correlation needs a cluster with at least two observed subjects".into(),
        ));
    }
    let denom = if pairs > k { (pairs - k) as f64 } else { pairs as f64 };
    let raw = cross / phi / denom;
    let upper = 1.0 - ALPHA_MARGIN;
    let lower = if n_max >= 2 {
        -1.0 / (n_max as f64 - 1.0) + ALPHA_MARGIN
    } else {
        -upper
    };
    if raw > upper || raw < lower || !raw.is_finite() {
        let clamped = if raw.is_nan() { 0.0 } else { raw.clamp(lower, upper) };
        return Ok((
            clamped,
            Some(format!("correlation estimate {raw:.6} clamped to {clamped:.6}")),
        ));
    }
    Ok((raw, None))
}
