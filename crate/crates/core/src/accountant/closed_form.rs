use serde::{Deserialize, Serialize};

use super::{AccountantError, PrivacyParams, Result, Warning};

/// How the supplied eigenvalue relates to the aggregated covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedFormMode {
    /// `lambda` is the smallest eigenvalue of the summed non-sensitive covariance.
    General,
    /// `lambda` is the smallest eigenvalue of one IID non-sensitive user; the
    /// aggregate has `N · lambda`.
    Iid,
    /// `lambda` is the smallest non-zero eigenvalue; the caller has checked
    /// that every substitution difference lies in the covariance support.
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormBound {
    pub epsilon: f64,
    pub region: Region,
    /// Effective eigenvalue of the aggregate after applying the mode.
    pub lambda: f64,
    /// Branch threshold `λ₀ = 4C²√(2 ln(1.25/δ)) / B²`.
    pub lambda_threshold: f64,
    /// `2C / (B √λ)`: the update sensitivity measured in whitened units.
    pub whitened_sensitivity: f64,
    /// `f(ε)` in the low-privacy region.
    pub delta_validity: Option<f64>,
    pub warnings: Vec<Warning>,
}

/// `f(ε) = 1/2 − e^{−3ε} / √(4πε)`.
pub fn delta_validity_bound(eps: f64) -> f64 {
    0.5 - (-3.0 * eps).exp() / (4.0 * std::f64::consts::PI * eps).sqrt()
}

/// Per-round (ε, δ) of the aggregated Gaussian noise for a sensitive user
/// whose update has sensitivity `2C/B`.
pub fn eps_dp_closed_form(lambda_min: f64, p: &PrivacyParams, mode: ClosedFormMode) -> Result<ClosedFormBound> {
    p.validate()?;
    if !(lambda_min > 0.0) || !lambda_min.is_finite() {
        return Err(AccountantError::NonPositiveLambda(lambda_min));
    }
    let lambda = match mode {
        ClosedFormMode::General | ClosedFormMode::Singular => lambda_min,
        ClosedFormMode::Iid => p.n() * lambda_min,
    };
    let log_term = (2.0 * (1.25 / p.delta).ln()).sqrt();
    let b2 = p.b() * p.b();
    let lambda_threshold = 4.0 * p.c2() * log_term / b2;
    let whitened_sensitivity = 2.0 * p.clip / (p.b() * lambda.sqrt());

    if lambda > lambda_threshold {
        let epsilon = whitened_sensitivity * log_term;
        let mut warnings = Vec::new();
        if epsilon >= 1.0 {
            warnings.push(Warning::RegimeWarning { epsilon });
        }
        Ok(ClosedFormBound {
            epsilon,
            region: Region::High,
            lambda,
            lambda_threshold,
            whitened_sensitivity,
            delta_validity: None,
            warnings,
        })
    } else {
        let epsilon = (2.0 * p.c2() / (b2 * lambda)).max(1.0);
        let bound = delta_validity_bound(epsilon);
        if p.delta >= bound {
            return Err(AccountantError::DeltaOutOfRegion { delta: p.delta, bound });
        }
        Ok(ClosedFormBound {
            epsilon,
            region: Region::Low,
            lambda,
            lambda_threshold,
            whitened_sensitivity,
            delta_validity: Some(bound),
            warnings: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaTotal {
    pub total: f64,
    /// `total ≥ 1`: the guarantee is vacuous.
    pub meaningless: bool,
}

/// `δ + (1 + e^ε) δ₀` for approximately Gaussian updates.
pub fn delta_approx_gaussian(eps: f64, p: &PrivacyParams) -> DeltaTotal {
    let total = if p.delta0 == 0.0 {
        p.delta
    } else {
        p.delta + (1.0 + eps.exp()) * p.delta0
    };
    DeltaTotal {
        total,
        meaningless: total >= 1.0,
    }
}
