use serde::{Deserialize, Serialize};

use super::{AccountantError, PrivacyParams, Result};

/// Which Rényi bound a curve evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RdpVariant {
    /// Inherent Gaussian noise with non-singular covariances:
    /// `(2αBC²/D² + αC²/((α−1)D)) / (Σλ_min − αC²/D)`, α < DΣλ_min/C².
    Theorem1Rdp,
    /// Water-filling floor, B in the numerator:
    /// `(2αBC²/D² + 2αC²/((α−1)D)) / (Nσ² − 2αC²/D)`, α < Nσ²D/(2C²).
    WfdpA,
    /// Water-filling floor, B in the denominator:
    /// `(2αC²/D² + 2αC²/((α−1)BD)) / (Nσ² − 2αC²/(BD))`, α < Nσ²BD/(2C²).
    WfdpB,
    /// Mean-shift Gaussian mechanism with fixed covariance: `α Δ² / 2`.
    GaussianMechanism,
}

impl RdpVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Theorem1Rdp => "theorem1_rdp",
            Self::WfdpA => "wfdp_a",
            Self::WfdpB => "wfdp_b",
            Self::GaussianMechanism => "gaussian_mechanism",
        }
    }
}

/// Variant-specific input beyond [`PrivacyParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum RdpContext {
    /// Σ λ_min over non-sensitive users, on the unscaled `(1/D) Σ g gᵀ`
    /// covariance (the aggregate carries an extra `1/B`).
    SumLambdaMin(f64),
    /// Use `ns_users` and `floor` from the parameters.
    Floor,
    /// Mahalanobis distance between the two neighbouring means.
    WhitenedSensitivity(f64),
}

/// Anything that maps α to an RDP ε on an open interval `(1, upper)`.
pub trait RdpEvaluate {
    /// Right end of the validity interval (may be `+∞`).
    fn validity_upper(&self) -> f64;

    /// RDP ε at `alpha`; `+∞` outside the validity interval.
    fn eval(&self, alpha: f64) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub variant: RdpVariant,
    pub params: PrivacyParams,
    pub context: RdpContext,
}

impl RdpCurve {
    pub fn new(variant: RdpVariant, params: PrivacyParams, context: RdpContext) -> Result<Self> {
        params.validate()?;
        let ok = matches!(
            (variant, context),
            (RdpVariant::Theorem1Rdp, RdpContext::SumLambdaMin(_))
                | (RdpVariant::WfdpA | RdpVariant::WfdpB, RdpContext::Floor)
                | (RdpVariant::GaussianMechanism, RdpContext::WhitenedSensitivity(_))
        );
        if !ok {
            return Err(AccountantError::InvalidParam {
                name: "context",
                reason: format!("{context:?} does not apply to {}", variant.name()),
            });
        }
        match context {
            RdpContext::SumLambdaMin(s) if !(s > 0.0 && s.is_finite()) => {
                return Err(AccountantError::NonPositiveLambda(s));
            }
            RdpContext::WhitenedSensitivity(s) if !(s >= 0.0 && s.is_finite()) => {
                return Err(AccountantError::InvalidParam {
                    name: "sensitivity",
                    reason: format!("must be non-negative, got {s}"),
                });
            }
            _ => {}
        }
        Ok(Self {
            variant,
            params,
            context,
        })
    }

    pub fn theorem1(params: PrivacyParams, sum_lambda_min: f64) -> Result<Self> {
        Self::new(RdpVariant::Theorem1Rdp, params, RdpContext::SumLambdaMin(sum_lambda_min))
    }

    pub fn wfdp(variant: RdpVariant, params: PrivacyParams) -> Result<Self> {
        Self::new(variant, params, RdpContext::Floor)
    }

    pub fn gaussian(params: PrivacyParams, whitened_sensitivity: f64) -> Result<Self> {
        Self::new(
            RdpVariant::GaussianMechanism,
            params,
            RdpContext::WhitenedSensitivity(whitened_sensitivity),
        )
    }

    /// Whether any α > 1 is admissible.
    pub fn has_valid_alpha(&self) -> bool {
        self.validity_upper() > 1.0
    }

    pub fn describe_interval(&self) -> String {
        let p = &self.params;
        match self.variant {
            RdpVariant::Theorem1Rdp => format!(
                "alpha < D*sum_lambda_min/C^2 = {}",
                self.validity_upper()
            ),
            RdpVariant::WfdpA => format!(
                "alpha < N*sigma^2*D/(2C^2) = {} (N={}, sigma^2={}, D={}, C={})",
                self.validity_upper(),
                p.ns_users,
                p.floor,
                p.local_size,
                p.clip
            ),
            RdpVariant::WfdpB => format!(
                "alpha < N*sigma^2*B*D/(2C^2) = {} (N={}, sigma^2={}, B={}, D={}, C={})",
                self.validity_upper(),
                p.ns_users,
                p.floor,
                p.batch,
                p.local_size,
                p.clip
            ),
            RdpVariant::GaussianMechanism => "alpha > 1".to_string(),
        }
    }
}

impl RdpEvaluate for RdpCurve {
    fn validity_upper(&self) -> f64 {
        let p = &self.params;
        match (self.variant, self.context) {
            (RdpVariant::Theorem1Rdp, RdpContext::SumLambdaMin(s)) => p.d() * s / p.c2(),
            (RdpVariant::WfdpA, _) => p.n() * p.floor * p.d() / (2.0 * p.c2()),
            (RdpVariant::WfdpB, _) => p.n() * p.floor * p.b() * p.d() / (2.0 * p.c2()),
            _ => f64::INFINITY,
        }
    }

    fn eval(&self, alpha: f64) -> f64 {
        if !(alpha > 1.0) || alpha >= self.validity_upper() {
            return f64::INFINITY;
        }
        let p = &self.params;
        let (c2, b, d) = (p.c2(), p.b(), p.d());
        let a = alpha;
        let value = match (self.variant, self.context) {
            (RdpVariant::Theorem1Rdp, RdpContext::SumLambdaMin(s)) => {
                (2.0 * a * b * c2 / (d * d) + a * c2 / ((a - 1.0) * d)) / (s - a * c2 / d)
            }
            (RdpVariant::WfdpA, _) => {
                let ns = p.n() * p.floor;
                (2.0 * a * b * c2 / (d * d) + 2.0 * a * c2 / ((a - 1.0) * d)) / (ns - 2.0 * a * c2 / d)
            }
            (RdpVariant::WfdpB, _) => {
                let ns = p.n() * p.floor;
                (2.0 * a * c2 / (d * d) + 2.0 * a * c2 / ((a - 1.0) * b * d)) / (ns - 2.0 * a * c2 / (b * d))
            }
            (RdpVariant::GaussianMechanism, RdpContext::WhitenedSensitivity(s)) => a * s * s / 2.0,
            _ => f64::INFINITY,
        };
        if value >= 0.0 {
            value
        } else {
            f64::INFINITY
        }
    }
}

/// RDP ε of one round at `alpha`.
pub fn rdp_bound(alpha: f64, p: &PrivacyParams, variant: RdpVariant, context: RdpContext) -> Result<f64> {
    let curve = RdpCurve::new(variant, *p, context)?;
    let value = curve.eval(alpha);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(AccountantError::AlphaOutOfRange {
            alpha,
            upper: curve.validity_upper(),
        })
    }
}

/// `(α, ε_rdp)`-RDP implies `(ε_rdp + ln(1/δ)/(α−1), δ)`-DP.
pub fn rdp_to_dp(alpha: f64, eps_rdp: f64, delta: f64) -> f64 {
    eps_rdp + (1.0 / delta).ln() / (alpha - 1.0)
}

/// `ln(1 + q (e^ε − 1))`.
pub fn amplify_subsampling(eps: f64, q: f64) -> f64 {
    if q >= 1.0 {
        return eps;
    }
    (q * eps.exp_m1()).ln_1p()
}

/// Grid used by [`optimize_alpha`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaGrid {
    pub points: usize,
    /// Relative shrink applied at both ends of the validity interval.
    pub margin: f64,
    /// Upper end used when the interval is unbounded.
    pub cap: f64,
    /// Golden-section stops at this relative bracket width.
    pub refine_tol: f64,
}

impl Default for AlphaGrid {
    fn default() -> Self {
        Self {
            points: 10_000,
            margin: 1e-9,
            cap: 1e6,
            refine_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizedAlpha {
    pub alpha: f64,
    pub epsilon: f64,
    pub rdp_epsilon: f64,
}

/// Minimises `rdp_to_dp(α, curve(α), δ)` over a log-spaced grid inside the
/// validity interval, then refines the best bracket by golden section.
pub fn optimize_alpha<C: RdpEvaluate + ?Sized>(curve: &C, delta: f64, grid: AlphaGrid) -> Result<OptimizedAlpha> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::InvalidParam {
            name: "delta",
            reason: format!("must lie in (0, 1), got {delta}"),
        });
    }
    let upper = curve.validity_upper();
    let lo = 1.0 + grid.margin;
    let hi = if upper.is_finite() {
        upper * (1.0 - grid.margin)
    } else {
        grid.cap
    };
    if !(hi > lo) {
        return Err(AccountantError::EmptyValidityInterval(format!(
            "upper end {upper} does not exceed 1"
        )));
    }
    let objective = |a: f64| rdp_to_dp(a, curve.eval(a), delta);
    let n = grid.points.max(3);
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    let at = |i: usize| (ln_lo + (ln_hi - ln_lo) * i as f64 / (n - 1) as f64).exp();

    let mut best_i = 0;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let v = objective(at(i));
        if v < best {
            best = v;
            best_i = i;
        }
    }
    if !best.is_finite() {
        return Err(AccountantError::EmptyValidityInterval(
            "curve is infinite on the whole grid".into(),
        ));
    }
    let mut best_alpha = at(best_i);

    let mut a = at(best_i.saturating_sub(1));
    let mut b = at((best_i + 1).min(n - 1));
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = objective(x1);
    let mut f2 = objective(x2);
    while (b - a) > grid.refine_tol * a {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = objective(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = objective(x2);
        }
    }
    for (x, f) in [(x1, f1), (x2, f2)] {
        if f < best {
            best = f;
            best_alpha = x;
        }
    }
    Ok(OptimizedAlpha {
        alpha: best_alpha,
        epsilon: best,
        rdp_epsilon: curve.eval(best_alpha),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small() -> PrivacyParams {
        PrivacyParams {
            clip: 1.0,
            batch: 10,
            local_size: 100,
            ns_users: 50,
            delta: 1e-5,
            floor: 0.01,
            ..Default::default()
        }
    }

    /// Dense scan, no refinement: the oracle for the optimiser.
    fn brute_force(curve: &RdpCurve, delta: f64) -> (f64, f64) {
        let upper = curve.validity_upper().min(1e4);
        let n = 2_000_000;
        (1..n)
            .map(|i| 1.0 + (upper - 1.0) * i as f64 / n as f64)
            .map(|a| (a, rdp_to_dp(a, curve.eval(a), delta)))
            .fold((0.0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
    }

    #[test]
    fn hand_evaluated_bounds() {
        let p = small();
        let t1 = rdp_bound(2.0, &p, RdpVariant::Theorem1Rdp, RdpContext::SumLambdaMin(0.5)).unwrap();
        assert_relative_eq!(t1, 0.024 / 0.48, epsilon = 1e-15);
        assert_relative_eq!(t1, 0.05, epsilon = 1e-15);
        let a = rdp_bound(2.0, &p, RdpVariant::WfdpA, RdpContext::Floor).unwrap();
        assert_relative_eq!(a, 0.044 / 0.46, epsilon = 1e-15);
        let b = rdp_bound(2.0, &p, RdpVariant::WfdpB, RdpContext::Floor).unwrap();
        assert_relative_eq!(b, 0.0044 / 0.496, epsilon = 1e-15);
        assert!(a / b > 10.0);
    }

    #[test]
    fn out_of_range_alpha() {
        let p = small();
        // WFDP_A upper end: 50·0.01·100/2 = 25.
        assert!(matches!(
            rdp_bound(25.0, &p, RdpVariant::WfdpA, RdpContext::Floor),
            Err(AccountantError::AlphaOutOfRange { .. })
        ));
        let curve = RdpCurve::wfdp(RdpVariant::WfdpA, p).unwrap();
        assert_eq!(curve.eval(30.0), f64::INFINITY);
        assert_eq!(curve.eval(1.0), f64::INFINITY);
        assert!(curve.eval(24.0).is_finite());
    }

    #[test]
    fn conversion() {
        assert_relative_eq!(rdp_to_dp(2.0, 0.05, 1e-5), 0.05 + 1e5f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(rdp_to_dp(2.0, 0.0, (-1.0f64).exp()), 1.0, epsilon = 1e-15);
        assert!((rdp_to_dp(1e12, 0.3, 1e-5) - 0.3).abs() < 1e-10);
    }

    #[test]
    fn optimizer_matches_dense_scan() {
        let curve = RdpCurve::wfdp(RdpVariant::WfdpA, small()).unwrap();
        let opt = optimize_alpha(&curve, 1e-5, AlphaGrid::default()).unwrap();
        let (alpha_bf, eps_bf) = brute_force(&curve, 1e-5);
        assert!(opt.epsilon <= eps_bf + 1e-9);
        assert_relative_eq!(opt.epsilon, eps_bf, epsilon = 1e-7);
        assert!((opt.alpha - alpha_bf).abs() < 1e-3);
        assert_relative_eq!(opt.epsilon, 1.0621, epsilon = 1e-3);
        assert!((opt.alpha - 16.45).abs() < 0.05);
    }

    #[test]
    fn optimizer_dominates_midpoint() {
        for variant in [RdpVariant::WfdpA, RdpVariant::WfdpB] {
            let curve = RdpCurve::wfdp(variant, small()).unwrap();
            let opt = optimize_alpha(&curve, 1e-5, AlphaGrid::default()).unwrap();
            let mid = (1.0 + curve.validity_upper()) / 2.0;
            assert!(opt.epsilon <= rdp_to_dp(mid, curve.eval(mid), 1e-5));
        }
        let curve = RdpCurve::gaussian(small(), 0.3).unwrap();
        let opt = optimize_alpha(&curve, 1e-5, AlphaGrid::default()).unwrap();
        // Closed form of min_α αΔ²/2 + L/(α−1): Δ²/2 + Δ√(2L).
        let l = 1e5f64.ln();
        assert_relative_eq!(opt.epsilon, 0.045 + 0.3 * (2.0 * l).sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn empty_interval() {
        // N σ² D = 2 C²  ⇒  upper end 1.
        let p = PrivacyParams {
            ns_users: 2,
            floor: 0.01,
            ..small()
        };
        let curve = RdpCurve::wfdp(RdpVariant::WfdpA, p).unwrap();
        assert_relative_eq!(curve.validity_upper(), 1.0, epsilon = 1e-15);
        assert!(matches!(
            optimize_alpha(&curve, 1e-5, AlphaGrid::default()),
            Err(AccountantError::EmptyValidityInterval(_))
        ));
    }

    #[test]
    fn subsampling() {
        assert_relative_eq!(amplify_subsampling(1.0, 0.01), (1.0 + 0.01 * (std::f64::consts::E - 1.0)).ln(), epsilon = 1e-15);
        assert_relative_eq!(amplify_subsampling(1.0, 0.01), 0.017037, epsilon = 1e-6);
        assert_eq!(amplify_subsampling(0.7, 1.0), 0.7);
        assert_eq!(amplify_subsampling(0.0, 0.3), 0.0);
    }

    #[test]
    fn context_must_match_variant() {
        assert!(RdpCurve::new(RdpVariant::WfdpA, small(), RdpContext::SumLambdaMin(1.0)).is_err());
        assert!(RdpCurve::theorem1(small(), -1.0).is_err());
    }
}
