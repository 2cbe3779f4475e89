use serde::{Deserialize, Serialize};

use super::closed_form::{delta_approx_gaussian, eps_dp_closed_form, ClosedFormBound, ClosedFormMode, DeltaTotal};
use super::rdp::{amplify_subsampling, optimize_alpha, AlphaGrid, RdpContext, RdpCurve, RdpEvaluate, RdpVariant};
use super::{AccountantError, PrivacyParams, Result, Warning};

/// Which formula a round is accounted with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "route", content = "variant", rename_all = "snake_case")]
pub enum Route {
    ClosedForm(ClosedFormMode),
    Rdp(RdpVariant),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoundBound {
    ClosedForm {
        bound: ClosedFormBound,
        delta_total: DeltaTotal,
    },
    /// Evaluated only when composed.
    Rdp { curve: RdpCurve },
    /// The round leaks without bound, e.g. the necessary condition failed.
    Infinite { cause: String },
}

impl RoundBound {
    /// Rényi description usable in RDP composition. A closed-form round is
    /// the Gaussian mechanism with its whitened sensitivity.
    fn as_curve(&self, params: &PrivacyParams) -> Option<RdpCurve> {
        match self {
            Self::ClosedForm { bound, .. } => RdpCurve::gaussian(*params, bound.whitened_sensitivity).ok(),
            Self::Rdp { curve } => Some(curve.clone()),
            Self::Infinite { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: u64,
    /// Smallest (non-zero) eigenvalue handed to the accountant.
    pub lambda_min: f64,
    pub bound: RoundBound,
    /// Trace of the explicitly added noise covariance.
    #[serde(default)]
    pub noise_trace: f64,
    #[serde(default)]
    pub params: PrivacyParams,
}

impl LedgerEntry {
    /// Per-round ε when one exists without composition.
    pub fn epsilon(&self) -> Option<f64> {
        match &self.bound {
            RoundBound::ClosedForm { bound, .. } => Some(bound.epsilon),
            RoundBound::Rdp { .. } => None,
            RoundBound::Infinite { .. } => Some(f64::INFINITY),
        }
    }

    /// Per-round (ε, δ) for simple composition, with subsampling applied.
    fn simple_epsilon(&self, delta: f64) -> Result<f64> {
        let eps = match &self.bound {
            RoundBound::ClosedForm { bound, .. } => bound.epsilon,
            RoundBound::Rdp { curve } => match optimize_alpha(curve, delta, AlphaGrid::default()) {
                Ok(o) => o.epsilon,
                Err(AccountantError::EmptyValidityInterval(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            },
            RoundBound::Infinite { .. } => return Ok(f64::INFINITY),
        };
        Ok(amplify_subsampling(eps, self.params.sampling_ratio))
    }
}

/// Accounts one round.
pub fn account_round(round: u64, lambda: f64, p: &PrivacyParams, route: Route) -> Result<LedgerEntry> {
    let bound = match route {
        Route::ClosedForm(mode) => {
            let bound = eps_dp_closed_form(lambda, p, mode)?;
            let delta_total = delta_approx_gaussian(bound.epsilon, p);
            RoundBound::ClosedForm { bound, delta_total }
        }
        Route::Rdp(variant) => {
            let context = match variant {
                RdpVariant::Theorem1Rdp => RdpContext::SumLambdaMin(lambda),
                RdpVariant::WfdpA | RdpVariant::WfdpB => RdpContext::Floor,
                RdpVariant::GaussianMechanism => {
                    if !(lambda > 0.0) {
                        return Err(AccountantError::NonPositiveLambda(lambda));
                    }
                    RdpContext::WhitenedSensitivity(2.0 * p.clip / (p.b() * lambda.sqrt()))
                }
            };
            RoundBound::Rdp {
                curve: RdpCurve::new(variant, *p, context)?,
            }
        }
    };
    Ok(LedgerEntry {
        round,
        lambda_min: lambda,
        bound,
        noise_trace: 0.0,
        params: *p,
    })
}

/// Append-only sequence of accounted rounds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundLedger {
    pub entries: Vec<LedgerEntry>,
    /// Learning rate applied after the mechanism, kept for reproducibility.
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

impl RoundLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: LedgerEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.round <= last.round {
                return Err(AccountantError::NonIncreasingRound {
                    round: entry.round,
                    last: last.round,
                });
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_round(&self) -> Option<u64> {
        self.entries.last().map(|e| e.round)
    }

    /// Appends `other` after this ledger, shifting its round numbers.
    pub fn concat(&self, other: &RoundLedger) -> RoundLedger {
        let mut out = self.clone();
        let offset = self.last_round().unwrap_or(0);
        let first = other.entries.first().map(|e| e.round).unwrap_or(1);
        for e in &other.entries {
            let mut e = e.clone();
            e.round = e.round - first + offset + 1;
            out.entries.push(e);
        }
        out
    }

    pub fn report(&self, mode: CompositionMode, delta: f64) -> Result<LedgerReport> {
        let total = compose(self, mode, delta)?;
        Ok(LedgerReport {
            params: self.entries.first().map(|e| e.params),
            learning_rate: self.learning_rate,
            entries: self.entries.clone(),
            mode,
            delta,
            total_epsilon: total.epsilon,
            alpha: total.alpha,
            warnings: total.warnings,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionMode {
    Simple,
    Rdp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub mode: CompositionMode,
    pub epsilon: f64,
    pub delta: f64,
    /// Optimal order in RDP mode.
    pub alpha: Option<f64>,
    pub warnings: Vec<Warning>,
}

/// Sum of per-round Rényi curves, identical curves grouped.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedCurve {
    pub parts: Vec<(RdpCurve, u64)>,
}

impl ComposedCurve {
    pub fn new() -> Self {
        Self { parts: Vec::new() }
    }

    pub fn add(&mut self, curve: RdpCurve) {
        match self.parts.iter_mut().find(|(c, _)| *c == curve) {
            Some((_, n)) => *n += 1,
            None => self.parts.push((curve, 1)),
        }
    }

    pub fn variant_count(&self) -> usize {
        let mut v: Vec<_> = self.parts.iter().map(|(c, _)| c.variant).collect();
        v.sort();
        v.dedup();
        v.len()
    }
}

impl Default for ComposedCurve {
    fn default() -> Self {
        Self::new()
    }
}

impl RdpEvaluate for ComposedCurve {
    fn validity_upper(&self) -> f64 {
        self.parts
            .iter()
            .map(|(c, _)| c.validity_upper())
            .fold(f64::INFINITY, f64::min)
    }

    fn eval(&self, alpha: f64) -> f64 {
        self.parts.iter().map(|(c, n)| *n as f64 * c.eval(alpha)).sum()
    }
}

/// Total ε of a ledger at the given δ.
pub fn compose(ledger: &RoundLedger, mode: CompositionMode, delta: f64) -> Result<Composition> {
    if ledger.is_empty() {
        return Err(AccountantError::EmptyLedger);
    }
    let mut warnings = Vec::new();
    for e in &ledger.entries {
        if let RoundBound::Infinite { cause } = &e.bound {
            warnings.push(Warning::InfiniteRound {
                round: e.round,
                cause: cause.clone(),
            });
        }
        if let RoundBound::ClosedForm { bound, delta_total } = &e.bound {
            for w in &bound.warnings {
                if !warnings.contains(w) {
                    warnings.push(w.clone());
                }
            }
            if delta_total.meaningless {
                warnings.push(Warning::MeaninglessDelta {
                    total: delta_total.total,
                });
            }
        }
    }
    match mode {
        CompositionMode::Simple => {
            let mut epsilon = 0.0;
            for e in &ledger.entries {
                epsilon += e.simple_epsilon(delta)?;
            }
            Ok(Composition {
                mode,
                epsilon,
                delta,
                alpha: None,
                warnings,
            })
        }
        CompositionMode::Rdp => {
            let mut curve = ComposedCurve::new();
            let mut infinite = false;
            for e in &ledger.entries {
                match e.bound.as_curve(&e.params) {
                    Some(c) => curve.add(c),
                    None if matches!(e.bound, RoundBound::Infinite { .. }) => infinite = true,
                    None => return Err(AccountantError::NotRdpComposable(e.round)),
                }
            }
            if curve.variant_count() > 1 {
                warnings.push(Warning::MixedCurveVariants);
            }
            if infinite || curve.parts.is_empty() {
                return Ok(Composition {
                    mode,
                    epsilon: f64::INFINITY,
                    delta,
                    alpha: None,
                    warnings,
                });
            }
            let (epsilon, alpha) = match optimize_alpha(&curve, delta, AlphaGrid::default()) {
                Ok(o) => (o.epsilon, Some(o.alpha)),
                Err(AccountantError::EmptyValidityInterval(_)) => (f64::INFINITY, None),
                Err(e) => return Err(e),
            };
            Ok(Composition {
                mode,
                epsilon,
                delta,
                alpha,
                warnings,
            })
        }
    }
}

/// Document written next to simulation outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub params: Option<PrivacyParams>,
    pub learning_rate: Option<f64>,
    pub entries: Vec<LedgerEntry>,
    pub mode: CompositionMode,
    pub delta: f64,
    pub total_epsilon: f64,
    pub alpha: Option<f64>,
    pub warnings: Vec<Warning>,
}
