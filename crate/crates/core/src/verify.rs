//! Ground-truth oracles for the accountant: span checks, the four-user
//! counterexample, the exact Gaussian-mechanism δ(ε), and dominance harnesses
//! that compare each bound against exact quantities on small instances.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::accountant::{eps_dp_closed_form, rdp_bound, ClosedFormMode, PrivacyParams, RdpContext, RdpVariant, Region};
use crate::linalg::{self, Matrix};
use crate::seeding::derive_rng;
use crate::spectra::{
    self, estimate_mean_cov, floor_eigenvalues, sample_gaussian, span_contains, CovarianceModel, GradientMatrix,
    SpectraError,
};

/// Absolute slack on dominance margins.
pub const MARGIN_SLACK: f64 = 1e-9;

/// Relative tolerance of the span test.
pub const SPAN_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("dimension {0} must be a positive multiple of 4")]
    BadDimension(usize),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Violated,
}

/// Whether `replacement` lies in the span of every user's gradient columns.
pub fn check_necessary_condition(
    gradients: &[GradientMatrix<f64>],
    replacement: &[f64],
    tol: f64,
) -> Result<Verdict> {
    let cols: Vec<Vec<f64>> = gradients.iter().flat_map(|g| g.columns().iter().cloned()).collect();
    Ok(if span_contains(&cols, replacement, tol)? {
        Verdict::Satisfied
    } else {
        Verdict::Violated
    })
}

/// Whether every difference lies in the support of `model`.
pub fn check_support(differences: &[Vec<f64>], model: &CovarianceModel<f64>) -> Result<Verdict> {
    let basis = model.support();
    for d in differences {
        if !span_contains(&basis, d, SPAN_TOL)? {
            return Ok(Verdict::Violated);
        }
    }
    Ok(Verdict::Satisfied)
}

/// Standard normal CDF.
fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Exact δ(ε) of `N(0, σ²)` against `N(Δ, σ²)`.
pub fn analytic_gaussian_delta(sensitivity: f64, noise_std: f64, eps: f64) -> f64 {
    if sensitivity == 0.0 {
        return 0.0;
    }
    let a = sensitivity / (2.0 * noise_std);
    let b = eps * noise_std / sensitivity;
    let tail = phi(-a - b);
    let second = if tail > 0.0 { (eps + tail.ln()).exp() } else { 0.0 };
    (phi(a - b) - second).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub instance: String,
    pub exact: f64,
    pub bound: f64,
    pub margin: f64,
    pub pass: bool,
}

impl DominanceReport {
    pub fn new(instance: String, exact: f64, bound: f64) -> Self {
        let margin = bound - exact;
        Self {
            instance,
            exact,
            bound,
            margin,
            pass: margin >= -MARGIN_SLACK,
        }
    }
}

fn unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| f64::standard_normal(rng)).collect();
        let n = linalg::norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

use crate::Scalar;

/// Random vector of norm at most `c`.
fn in_ball<R: Rng + ?Sized>(d: usize, c: f64, rng: &mut R) -> Vec<f64> {
    let r = c * rng.random_range(0.0f64..1.0).powf(1.0 / d as f64);
    unit(d, rng).into_iter().map(|x| x * r).collect()
}

/// Random symmetric positive-definite matrix with the given spectrum.
fn with_spectrum<R: Rng + ?Sized>(eigvals: &[f64], rng: &mut R) -> Matrix<f64> {
    let d = eigvals.len();
    let a = Matrix::from_fn(d, d, |_, _| f64::standard_normal(rng));
    let (_, q) = linalg::symmetric_eigen(&a.matmul(&a.transpose()));
    let mut m = Matrix::zeros(d, d);
    for (k, &l) in eigvals.iter().enumerate() {
        m.add_outer(&q.column(k), l);
    }
    m.symmetrized()
}

/// Parameters of one closed-form certification instance.
#[derive(Debug, Clone)]
pub struct ClosedFormInstance {
    pub params: PrivacyParams,
    pub cov: Matrix<f64>,
    pub gradients: Vec<Vec<f64>>,
}

fn closed_form_instance<R: Rng + ?Sized>(rng: &mut R) -> ClosedFormInstance {
    let d = rng.random_range(1..=5);
    let dsize = rng.random_range(2..=10usize);
    let batch = rng.random_range(1..=dsize);
    let clip = rng.random_range(0.5..2.0);
    let delta = 10f64.powf(rng.random_range(-6.0..-2.0));
    let l = (1.25 / delta).ln();
    // ε < 1 above this eigenvalue, which also lies above the branch threshold.
    let lambda_one = 8.0 * clip * clip * l / (batch * batch) as f64;
    let lambda_min = lambda_one * (1.0 + 3.0 * rng.random_range(0.0..1.0));
    let mut eig: Vec<f64> = (0..d)
        .map(|k| {
            if k == 0 {
                lambda_min
            } else {
                lambda_min * (1.0 + 5.0 * rng.random_range(0.0..1.0))
            }
        })
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let cov = with_spectrum(&eig, rng);
    let gradients = (0..dsize).map(|_| in_ball(d, clip, rng)).collect();
    ClosedFormInstance {
        params: PrivacyParams {
            clip,
            batch: batch as u64,
            local_size: dsize as u64,
            ns_users: 1,
            delta,
            ..Default::default()
        },
        cov,
        gradients,
    }
}

/// Exact δ of the closed-form instance at the accountant's ε, with the
/// non-sensitive noise scaled by `inflate`.
pub fn certify_closed_form_instance<R: Rng + ?Sized>(
    inst: &ClosedFormInstance,
    inflate: f64,
    pairs: usize,
    rng: &mut R,
) -> Result<(DominanceReport, Region)> {
    let p = &inst.params;
    let cov = inst.cov.scale(inflate);
    let model = CovarianceModel::from_covariance(vec![0.0; cov.rows()], &cov)?;
    let bound = eps_dp_closed_form(model.lambda_min(), p, ClosedFormMode::General)
        .expect("instance in the high region by construction");
    let l = linalg::cholesky(&cov).ok_or(SpectraError::SingularCovariance)?;
    let b = p.batch as f64;
    let d = cov.rows();
    let whiten = |v: &[f64]| linalg::norm(&linalg::solve_lower(&l, v));

    // Extremal pair: g = C v_min replaced by −C v_min.
    let v_min = model.eigvecs.column(d - 1);
    let mut worst = whiten(&v_min.iter().map(|x| 2.0 * p.clip * x / b).collect::<Vec<_>>());
    for _ in 0..pairs {
        let j = rng.random_range(0..inst.gradients.len());
        let g2 = in_ball(d, p.clip, rng);
        let diff: Vec<f64> = inst.gradients[j].iter().zip(&g2).map(|(a, c)| (a - c) / b).collect();
        worst = worst.max(whiten(&diff));
    }
    let exact = analytic_gaussian_delta(worst, 1.0, bound.epsilon);
    let desc = format!(
        "d={d} D={} B={} C={:.3} delta={:.2e} lambda_min={:.4e} eps={:.4}",
        p.local_size, p.batch, p.clip, p.delta, bound.lambda, bound.epsilon
    );
    Ok((DominanceReport::new(desc, exact, p.delta), bound.region))
}

/// Checks the closed-form bound on `n` random high-region instances.
pub fn certify_closed_form(n: usize, seed: u64) -> Result<Vec<DominanceReport>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = derive_rng("certify-closed", &[seed, i as u64]);
            let inst = closed_form_instance(&mut rng);
            let (mut r, _) = certify_closed_form_instance(&inst, 1.0, 10_000, &mut rng)?;
            r.instance = format!("trial={i} {}", r.instance);
            Ok(r)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Soundness {
    Sound,
    Unsound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCertification {
    pub variant: RdpVariant,
    pub alphas: Vec<f64>,
    pub trials: usize,
    /// (instance, α) pairs where the bound was finite.
    pub applicable: usize,
    pub violations: usize,
    pub verdict: Soundness,
    pub reports: Vec<DominanceReport>,
}

/// Exact `D_α` between two Gaussians; `+∞` when `Σ_α` is not positive
/// definite.
fn exact_renyi(alpha: f64, m1: &[f64], s1: &Matrix<f64>, m2: &[f64], s2: &Matrix<f64>) -> Result<f64> {
    match spectra::renyi_gaussian_dense(alpha, m1, s1, m2, s2) {
        Ok(v) => Ok(v),
        Err(SpectraError::IndefiniteSigmaAlpha) => Ok(f64::INFINITY),
        Err(e) => Err(e.into()),
    }
}

fn random_gradients<R: Rng + ?Sized>(d: usize, count: usize, clip: f64, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let r = clip * rng.random_range(0.5..1.0);
            unit(d, rng).into_iter().map(|x| x * r).collect()
        })
        .collect()
}

/// Replacement for example `j` of user 0: random in the ball, or the
/// antipode at full norm.
fn replacement<R: Rng + ?Sized>(g: &[f64], clip: f64, rng: &mut R) -> Vec<f64> {
    if rng.random_bool(0.5) {
        in_ball(g.len(), clip, rng)
    } else {
        let n = linalg::norm(g).max(1e-12);
        g.iter().map(|x| -clip * x / n).collect()
    }
}

/// Aggregate mean and covariance of the users' (optionally floored) models.
fn aggregate(models: &[CovarianceModel<f64>]) -> (Vec<f64>, Matrix<f64>) {
    let d = models[0].dim();
    let mut mean = vec![0.0; d];
    let mut cov = Matrix::zeros(d, d);
    for m in models {
        linalg::axpy(&mut mean, 1.0, &m.mean);
        cov = cov.add(&m.covariance());
    }
    (mean, cov)
}

struct RdpInstance {
    params: PrivacyParams,
    context: RdpContext,
    p: (Vec<f64>, Matrix<f64>),
    q: (Vec<f64>, Matrix<f64>),
    desc: String,
}

fn theorem1_instance<R: Rng + ?Sized>(rng: &mut R) -> Result<RdpInstance> {
    let d = rng.random_range(1..=3);
    let users = rng.random_range(2..=6);
    let dsize = rng.random_range(d + 2..=12);
    let batch = rng.random_range(1..=dsize);
    let clip = rng.random_range(0.5..2.0);
    let data: Vec<Vec<Vec<f64>>> = (0..users).map(|_| random_gradients(d, dsize, clip, rng)).collect();
    let j = rng.random_range(0..dsize);
    let mut changed = data[0].clone();
    changed[j] = replacement(&data[0][j], clip, rng);

    let fit = |cols: &[Vec<f64>]| -> Result<CovarianceModel<f64>> {
        Ok(estimate_mean_cov(&GradientMatrix::new(d, cols.to_vec(), clip)?, batch, None)?)
    };
    let mut first: Vec<CovarianceModel<f64>> = data.iter().map(|c| fit(c)).collect::<Result<_>>()?;
    // λ_min of the 1/D-scaled second moments under the first dataset.
    let sum_lambda: f64 = first.iter().map(|m| m.lambda_min() * batch as f64).sum();
    let p = aggregate(&first);
    first[0] = fit(&changed)?;
    let q = aggregate(&first);
    Ok(RdpInstance {
        params: PrivacyParams {
            clip,
            batch: batch as u64,
            local_size: dsize as u64,
            ns_users: users as u64,
            ..Default::default()
        },
        context: RdpContext::SumLambdaMin(sum_lambda.max(f64::MIN_POSITIVE)),
        p,
        q,
        desc: format!("d={d} N={users} D={dsize} B={batch} C={clip:.3} sum_lambda={sum_lambda:.4e}"),
    })
}

fn wfdp_instance<R: Rng + ?Sized>(rng: &mut R) -> Result<RdpInstance> {
    let d = rng.random_range(1..=4);
    let users = rng.random_range(2..=6);
    let dsize = rng.random_range(2..=10);
    let batch = rng.random_range(1..=dsize);
    let clip = rng.random_range(0.5..2.0);
    let c2 = clip * clip;
    let (n, b, dd) = (users as f64, batch as f64, dsize as f64);
    // Log-uniform floor spanning both printed validity intervals at α = 4.
    let lo = 1.05 * 8.0 * c2 / (n * b * dd);
    let hi = 20.0 * 8.0 * c2 / (n * dd);
    let floor = (lo.ln() + (hi.ln() - lo.ln()) * rng.random_range(0.0..1.0)).exp();

    let data: Vec<Vec<Vec<f64>>> = (0..users).map(|_| random_gradients(d, dsize, clip, rng)).collect();
    let j = rng.random_range(0..dsize);
    let mut changed = data[0].clone();
    changed[j] = replacement(&data[0][j], clip, rng);
    let released = |cols: &[Vec<f64>]| -> Result<CovarianceModel<f64>> {
        let m = estimate_mean_cov(&GradientMatrix::new(d, cols.to_vec(), clip)?, batch, None)?;
        Ok(floor_eigenvalues(&m, floor)?.0)
    };
    let mut models: Vec<CovarianceModel<f64>> = data.iter().map(|c| released(c)).collect::<Result<_>>()?;
    let p = aggregate(&models);
    models[0] = released(&changed)?;
    let q = aggregate(&models);
    Ok(RdpInstance {
        params: PrivacyParams {
            clip,
            batch: batch as u64,
            local_size: dsize as u64,
            ns_users: users as u64,
            floor,
            ..Default::default()
        },
        context: RdpContext::Floor,
        p,
        q,
        desc: format!("d={d} N={users} D={dsize} B={batch} C={clip:.3} sigma2={floor:.4e}"),
    })
}

/// Compares a Rényi bound against exact divergences on `n` random instances
/// at each order in `alphas`.
pub fn certify_rdp(variant: RdpVariant, n: usize, alphas: &[f64], seed: u64) -> Result<RdpCertification> {
    let per_trial: Vec<Vec<Option<DominanceReport>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = derive_rng("certify-rdp", &[seed, variant as u64, i as u64]);
            let inst = match variant {
                RdpVariant::Theorem1Rdp => theorem1_instance(&mut rng)?,
                RdpVariant::WfdpA | RdpVariant::WfdpB => wfdp_instance(&mut rng)?,
                RdpVariant::GaussianMechanism => {
                    let mut inst = wfdp_instance(&mut rng)?;
                    // Equal covariances: only the mean moves.
                    inst.q.1 = inst.p.1.clone();
                    let l = linalg::cholesky(&inst.p.1).ok_or(SpectraError::SingularCovariance)?;
                    let s = linalg::norm(&linalg::solve_lower(&l, &linalg::sub_vec(&inst.p.0, &inst.q.0)));
                    inst.context = RdpContext::WhitenedSensitivity(s);
                    inst
                }
            };
            alphas
                .iter()
                .map(|&a| {
                    let Ok(bound) = rdp_bound(a, &inst.params, variant, inst.context) else {
                        return Ok(None);
                    };
                    let exact = exact_renyi(a, &inst.p.0, &inst.p.1, &inst.q.0, &inst.q.1)?;
                    Ok(Some(DominanceReport::new(
                        format!("trial={i} alpha={a} {}", inst.desc),
                        exact,
                        bound,
                    )))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let reports: Vec<DominanceReport> = per_trial.into_iter().flatten().flatten().collect();
    let violations = reports.iter().filter(|r| !r.pass).count();
    Ok(RdpCertification {
        variant,
        alphas: alphas.to_vec(),
        trials: n,
        applicable: reports.len(),
        violations,
        verdict: if violations == 0 {
            Soundness::Sound
        } else {
            Soundness::Unsound
        },
        reports,
    })
}

/// Users 1–3 vanish on the last quarter of coordinates; user 4 does not.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    pub dim: usize,
    pub clip: f64,
    pub noise_users: Vec<GradientMatrix<f64>>,
    pub target: GradientMatrix<f64>,
    /// Two updates the target might send; they differ in the last quarter.
    pub candidates: [Vec<f64>; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistinguisherResult {
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// `2 · success − 1`.
    pub advantage: f64,
    /// Monte-Carlo standard error of the advantage.
    pub std_error: f64,
}

pub fn build_counterexample<R: Rng + ?Sized>(d: usize, gap: f64, rng: &mut R) -> Result<Counterexample> {
    if d == 0 || d % 4 != 0 {
        return Err(VerifyError::BadDimension(d));
    }
    let clip = 1.0;
    let head = d - d / 4;
    let per_user = d + 2;
    let noise_users = (0..3)
        .map(|_| {
            let cols = (0..per_user)
                .map(|_| {
                    let mut g = vec![0.0; d];
                    g[..head].copy_from_slice(&in_ball(head, clip, rng));
                    g
                })
                .collect();
            GradientMatrix::new(d, cols, clip)
        })
        .collect::<spectra::Result<Vec<_>>>()?;
    let target = GradientMatrix::new(d, (0..per_user).map(|_| in_ball(d, clip, rng)).collect(), clip)?;
    let base: Vec<f64> = target.mean().iter().map(|x| x * 0.5).collect();
    let mut other = base.clone();
    other[d - 1] += gap;
    Ok(Counterexample {
        dim: d,
        clip,
        noise_users,
        target,
        candidates: [base, other],
    })
}

impl Counterexample {
    pub fn gap(&self) -> f64 {
        linalg::norm(&linalg::sub_vec(&self.candidates[1], &self.candidates[0]))
    }

    /// Span test of the target's perturbation against users 1–3.
    pub fn check(&self) -> Result<Verdict> {
        let diff = linalg::sub_vec(&self.candidates[1], &self.candidates[0]);
        check_necessary_condition(&self.noise_users, &diff, SPAN_TOL)
    }

    /// Update distributions of users 1–3, optionally floored.
    pub fn noise_models(&self, floor: Option<f64>) -> Result<Vec<CovarianceModel<f64>>> {
        self.noise_users
            .iter()
            .map(|g| {
                let m = estimate_mean_cov(g, 1, None)?;
                Ok(match floor {
                    Some(f) => floor_eigenvalues(&m, f)?.0,
                    None => m,
                })
            })
            .collect()
    }

    /// Span test after flooring: the target's perturbation against the
    /// support of the summed noise models.
    pub fn check_floored(&self, floor: f64) -> Result<Verdict> {
        let models = self.noise_models(Some(floor))?;
        let sum = CovarianceModel::sum(&models)?;
        check_support(&[linalg::sub_vec(&self.candidates[1], &self.candidates[0])], &sum)
    }

    /// Closed-form ε of the floored instance: the target's update moves by the
    /// gap, so it is treated as sensitivity `2C/B` with `C = gap/2`, `B = 1`.
    pub fn floored_epsilon(&self, floor: f64, delta: f64) -> Result<f64> {
        let models = self.noise_models(Some(floor))?;
        let sum = CovarianceModel::sum(&models)?;
        let p = PrivacyParams {
            clip: self.gap() / 2.0,
            batch: 1,
            delta,
            ..Default::default()
        };
        Ok(eps_dp_closed_form(sum.lambda_min(), &p, ClosedFormMode::General)
            .map(|b| b.epsilon)
            .unwrap_or(f64::INFINITY))
    }

    /// The server sees the aggregate of users 1–3 and the target's candidate
    /// `b`; it guesses `b` by thresholding the projection on the candidate
    /// difference at the midpoint.
    pub fn distinguish(&self, floor: Option<f64>, trials: usize, seed: u64) -> Result<DistinguisherResult> {
        let models = self.noise_models(floor)?;
        let known_mean = models.iter().fold(vec![0.0; self.dim], |mut acc, m| {
            linalg::axpy(&mut acc, 1.0, &m.mean);
            acc
        });
        let dir = linalg::sub_vec(&self.candidates[1], &self.candidates[0]);
        let mid = 0.5 * (linalg::dot(&self.candidates[0], &dir) + linalg::dot(&self.candidates[1], &dir));
        let successes: usize = (0..trials)
            .into_par_iter()
            .map(|i| -> Result<usize> {
                let mut rng = derive_rng("distinguisher", &[seed, i as u64]);
                let b = usize::from(rng.random_bool(0.5));
                let mut agg = self.candidates[b].clone();
                for m in &models {
                    let s = sample_gaussian(m, &mut rng)?;
                    linalg::axpy(&mut agg, 1.0, &s);
                }
                let score = linalg::dot(&linalg::sub_vec(&agg, &known_mean), &dir);
                let guess = usize::from(score > mid);
                Ok(usize::from(guess == b))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        let rate = successes as f64 / trials as f64;
        Ok(DistinguisherResult {
            trials,
            successes,
            success_rate: rate,
            advantage: 2.0 * rate - 1.0,
            std_error: 2.0 * (rate * (1.0 - rate) / trials as f64).sqrt(),
        })
    }
}

/// Largest advantage an (ε, δ)-DP mechanism allows a balanced test.
pub fn advantage_bound(eps: f64, delta: f64) -> f64 {
    (eps.exp_m1() + 2.0 * delta) / (eps.exp() + 1.0)
}
