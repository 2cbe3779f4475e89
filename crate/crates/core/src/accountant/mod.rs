//! Privacy accounting for the inherent noise of securely aggregated updates.
//!
//! Per-round bounds come either from the closed-form Gaussian-mechanism
//! bound on the smallest eigenvalue of the aggregated non-sensitive
//! covariance ([`eps_dp_closed_form`]) or from Rényi-DP curves
//! ([`RdpCurve`]). Rounds are recorded in a [`RoundLedger`] and composed with
//! [`compose`].

mod closed_form;
mod ledger;
mod rdp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use closed_form::{
    delta_approx_gaussian, delta_validity_bound, eps_dp_closed_form, ClosedFormBound, ClosedFormMode,
    DeltaTotal, Region,
};
pub use ledger::{
    account_round, compose, ComposedCurve, Composition, CompositionMode, LedgerEntry, LedgerReport,
    RoundBound, RoundLedger, Route,
};
pub use rdp::{
    amplify_subsampling, optimize_alpha, rdp_bound, rdp_to_dp, AlphaGrid, OptimizedAlpha, RdpContext,
    RdpCurve, RdpEvaluate, RdpVariant,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountantError {
    #[error("invalid privacy parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },
    #[error("lambda_min must be positive, got {0:e}")]
    NonPositiveLambda(f64),
    #[error("delta {delta:e} is not below the low-privacy validity bound f(eps) = {bound:e}")]
    DeltaOutOfRegion { delta: f64, bound: f64 },
    #[error("alpha {alpha} outside validity interval (1, {upper})")]
    AlphaOutOfRange { alpha: f64, upper: f64 },
    #[error("empty α validity interval: {0}")]
    EmptyValidityInterval(String),
    #[error("ledger is empty")]
    EmptyLedger,
    #[error("round {round} does not follow round {last}")]
    NonIncreasingRound { round: u64, last: u64 },
    #[error("round {0} carries no Rényi description and cannot be composed in RDP mode")]
    NotRdpComposable(u64),
}

pub type Result<T> = std::result::Result<T, AccountantError>;

/// Conditions that do not stop accounting but must be surfaced in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    /// High-privacy formula produced ε ≥ 1, outside the regime it assumes.
    RegimeWarning { epsilon: f64 },
    /// δ + δ_c reached 1.
    MeaninglessDelta { total: f64 },
    /// Rounds with different Rényi curve variants were summed.
    MixedCurveVariants,
    /// A round carried an infinite bound.
    InfiniteRound { round: u64, cause: String },
}

/// Everything the per-round formulas need.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyParams {
    /// Per-example clip norm C.
    pub clip: f64,
    /// Batch size B.
    pub batch: u64,
    /// Local dataset size D.
    pub local_size: u64,
    /// Number of non-sensitive users N.
    pub ns_users: u64,
    pub delta: f64,
    /// Gaussian-approximation error δ₀ (0 for exactly Gaussian updates).
    #[serde(default)]
    pub delta0: f64,
    /// Eigenvalue floor σ².
    #[serde(default)]
    pub floor: f64,
    #[serde(default = "one")]
    pub sampling_ratio: f64,
    #[serde(default = "one_u64")]
    pub rounds: u64,
}

fn one() -> f64 {
    1.0
}

fn one_u64() -> u64 {
    1
}

impl Default for PrivacyParams {
    fn default() -> Self {
        Self {
            clip: 1.0,
            batch: 1,
            local_size: 1,
            ns_users: 1,
            delta: 1e-5,
            delta0: 0.0,
            floor: 0.0,
            sampling_ratio: 1.0,
            rounds: 1,
        }
    }
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        fn bad(name: &'static str, reason: impl Into<String>) -> AccountantError {
            AccountantError::InvalidParam {
                name,
                reason: reason.into(),
            }
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(bad("clip", format!("must be positive, got {}", self.clip)));
        }
        if self.batch == 0 {
            return Err(bad("batch", "must be at least 1"));
        }
        if self.local_size == 0 {
            return Err(bad("local_size", "must be at least 1"));
        }
        if self.ns_users == 0 {
            return Err(bad("ns_users", "must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(bad("delta", format!("must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.delta0 >= 0.0 && self.delta0.is_finite()) {
            return Err(bad("delta0", format!("must be non-negative, got {}", self.delta0)));
        }
        if !(self.floor >= 0.0 && self.floor.is_finite()) {
            return Err(bad("floor", format!("must be non-negative, got {}", self.floor)));
        }
        if !(self.sampling_ratio > 0.0 && self.sampling_ratio <= 1.0) {
            return Err(bad(
                "sampling_ratio",
                format!("must lie in (0, 1], got {}", self.sampling_ratio),
            ));
        }
        if self.rounds == 0 {
            return Err(bad("rounds", "must be at least 1"));
        }
        Ok(())
    }

    pub(crate) fn c2(&self) -> f64 {
        self.clip * self.clip
    }

    pub(crate) fn b(&self) -> f64 {
        self.batch as f64
    }

    pub(crate) fn d(&self) -> f64 {
        self.local_size as f64
    }

    pub(crate) fn n(&self) -> f64 {
        self.ns_users as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_names_offending_field() {
        let p = PrivacyParams {
            delta: 1.5,
            ..Default::default()
        };
        match p.validate() {
            Err(AccountantError::InvalidParam { name, .. }) => assert_eq!(name, "delta"),
            other => panic!("unexpected {other:?}"),
        }
        let p = PrivacyParams {
            sampling_ratio: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        assert!(PrivacyParams::default().validate().is_ok());
    }
}
