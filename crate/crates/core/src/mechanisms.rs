//! Per-user update generation and noising.
//!
//! Updates are produced on the clipped-gradient scale: `x` points along the
//! (clipped) gradient and the learning rate is applied only when the update
//! is submitted, via [`NoisedUpdate::submitted`]. This keeps the clip bound,
//! batch size and dataset size that the accountant sees meaningful.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::scalar::Scalar;
use crate::spectra::{
    estimate_mean_cov_with, floor_eigenvalues, sample_gaussian, BlockSpec, CovarianceModel,
    CovarianceOptions, GradientMatrix, SpectraError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("non-finite value in gradient")]
    NonFinite,
    #[error("local dataset is empty")]
    EmptyDataset,
    #[error("invalid update scheme: {0}")]
    InvalidScheme(String),
    #[error("{0} cannot carry a differential-privacy guarantee with this scheme")]
    Unsupported(&'static str),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
}

pub type Result<T> = std::result::Result<T, MechanismError>;

/// `C x / max(‖x‖, C)`.
pub fn clip_gradient<T: Scalar>(g: &[T], clip: T) -> Result<Vec<T>> {
    if g.iter().any(|x| !x.is_finite()) {
        return Err(MechanismError::NonFinite);
    }
    let n = linalg::norm(g);
    // A few ulps over C is a vector that was already clipped.
    if n <= clip * (T::one() + T::epsilon() * T::of(4.0)) {
        return Ok(g.to_vec());
    }
    let s = clip / n;
    Ok(g.iter().map(|&x| x * s).collect())
}

/// A differentiable per-example loss over a local dataset.
pub trait Objective<T: Scalar> {
    fn dim(&self) -> usize;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn example_gradient(&self, theta: &[T], index: usize) -> Vec<T>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    /// Mean of B clipped gradients drawn with replacement.
    IidSgd,
    /// Mean of all D clipped gradients.
    FullGd,
    /// Gaussian sample from the estimated gradient distribution.
    GaussianSampled,
    /// Local multi-step training; the whole pseudo-gradient is clipped.
    FedAvg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateScheme {
    pub kind: SchemeKind,
    pub batch: usize,
    /// Number of local-training replicas used to estimate the FedAvg
    /// update distribution.
    #[serde(default = "default_samples")]
    pub fedavg_samples: usize,
    #[serde(default = "default_one")]
    pub local_epochs: usize,
    #[serde(default = "default_local_batch")]
    pub local_batch: usize,
    pub learning_rate: f64,
    /// Subtract the mean before forming the covariance.
    #[serde(default)]
    pub centered_covariance: bool,
    /// Estimate the covariance in this many equal diagonal blocks.
    #[serde(default)]
    pub blocks: Option<usize>,
}

fn default_samples() -> usize {
    8
}

fn default_one() -> usize {
    1
}

fn default_local_batch() -> usize {
    10
}

impl UpdateScheme {
    pub fn new(kind: SchemeKind, batch: usize, learning_rate: f64) -> Self {
        Self {
            kind,
            batch,
            fedavg_samples: default_samples(),
            local_epochs: 1,
            local_batch: default_local_batch(),
            learning_rate,
            centered_covariance: false,
            blocks: None,
        }
    }

    pub fn validate(&self, local_size: usize) -> Result<()> {
        if local_size == 0 {
            return Err(MechanismError::EmptyDataset);
        }
        if self.batch == 0 {
            return Err(MechanismError::InvalidScheme("batch must be positive".into()));
        }
        if self.kind == SchemeKind::IidSgd && self.batch > local_size {
            return Err(MechanismError::InvalidScheme(format!(
                "batch {} exceeds local dataset size {local_size}",
                self.batch
            )));
        }
        if self.kind == SchemeKind::FedAvg {
            if self.fedavg_samples < 2 {
                return Err(MechanismError::InvalidScheme(
                    "FedAvg covariance estimation needs at least 2 samples".into(),
                ));
            }
            if self.local_batch == 0 || self.local_epochs == 0 {
                return Err(MechanismError::InvalidScheme(
                    "local batch and epochs must be positive".into(),
                ));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MechanismError::InvalidScheme("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn cov_options(&self, dim: usize) -> Result<CovarianceOptions> {
        let blocks = match self.blocks {
            Some(k) if k > 1 => Some(BlockSpec::even(dim, k)?),
            _ => None,
        };
        Ok(CovarianceOptions {
            centered: self.centered_covariance,
            blocks,
            ..CovarianceOptions::default()
        })
    }
}

/// One user's un-noised update and the distribution it is drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct RawUpdate<T> {
    pub x: Vec<T>,
    /// Clipped per-example gradients (or FedAvg replicas) behind the update.
    pub gradients: GradientMatrix<T>,
    /// Distribution of `x` as estimated from `gradients`.
    pub model: CovarianceModel<T>,
}

fn clipped_gradients<T: Scalar, O: Objective<T> + ?Sized>(
    objective: &O,
    theta: &[T],
    clip: T,
) -> Result<GradientMatrix<T>> {
    let d = objective.dim();
    let cols = (0..objective.len())
        .map(|j| clip_gradient(&objective.example_gradient(theta, j), clip))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientMatrix::new(d, cols, clip)?)
}

/// Computes the user's update on the clipped-gradient scale.
pub fn compute_update<T: Scalar, O: Objective<T> + ?Sized, R: Rng + ?Sized>(
    scheme: &UpdateScheme,
    objective: &O,
    theta: &[T],
    clip: T,
    rng: &mut R,
) -> Result<RawUpdate<T>> {
    scheme.validate(objective.len())?;
    if scheme.kind == SchemeKind::FedAvg {
        let (model, gradients) = fedavg_replicas(scheme, objective, theta, clip, scheme.fedavg_samples, rng)?;
        let x = gradients.columns()[0].clone();
        return Ok(RawUpdate { x, gradients, model });
    }
    let gradients = clipped_gradients(objective, theta, clip)?;
    let dsize = gradients.count();
    let (x, model) = match scheme.kind {
        SchemeKind::FullGd => {
            let mean = gradients.mean();
            (mean.clone(), CovarianceModel::degenerate(mean))
        }
        SchemeKind::IidSgd => {
            let mut x = vec![T::zero(); objective.dim()];
            for _ in 0..scheme.batch {
                let j = rng.random_range(0..dsize);
                linalg::axpy(&mut x, T::one(), &gradients.columns()[j]);
            }
            let inv = T::one() / T::of(scheme.batch as f64);
            x.iter_mut().for_each(|v| *v *= inv);
            (x, estimate_mean_cov_with(&gradients, scheme.batch, &scheme.cov_options(objective.dim())?)?)
        }
        SchemeKind::GaussianSampled => {
            let model = estimate_mean_cov_with(&gradients, scheme.batch, &scheme.cov_options(objective.dim())?)?;
            (sample_gaussian(&model, rng)?, model)
        }
        SchemeKind::FedAvg => unreachable!(),
    };
    Ok(RawUpdate { x, gradients, model })
}

/// One pass of local training from `theta`; returns the clipped
/// pseudo-gradient `(θ_start − θ_end) / η`.
fn local_training<T: Scalar, O: Objective<T> + ?Sized, R: Rng + ?Sized>(
    scheme: &UpdateScheme,
    objective: &O,
    theta: &[T],
    clip: T,
    rng: &mut R,
) -> Result<Vec<T>> {
    let eta = T::of(scheme.learning_rate);
    let mut w = theta.to_vec();
    let mut order: Vec<usize> = (0..objective.len()).collect();
    for _ in 0..scheme.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(scheme.local_batch) {
            let mut step = vec![T::zero(); w.len()];
            for &j in chunk {
                let g = clip_gradient(&objective.example_gradient(&w, j), clip)?;
                linalg::axpy(&mut step, T::one(), &g);
            }
            let s = eta / T::of(chunk.len() as f64);
            linalg::axpy(&mut w, -s, &step);
        }
    }
    let mut delta = linalg::sub_vec(theta, &w);
    delta.iter_mut().for_each(|v| *v /= eta);
    clip_gradient(&delta, clip)
}

fn fedavg_replicas<T: Scalar, O: Objective<T> + ?Sized, R: Rng + ?Sized>(
    scheme: &UpdateScheme,
    objective: &O,
    theta: &[T],
    clip: T,
    samples: usize,
    rng: &mut R,
) -> Result<(CovarianceModel<T>, GradientMatrix<T>)> {
    let cols = (0..samples)
        .map(|_| local_training(scheme, objective, theta, clip, rng))
        .collect::<Result<Vec<_>>>()?;
    let g = GradientMatrix::new(objective.dim(), cols, clip)?;
    let model = estimate_mean_cov_with(&g, scheme.batch, &scheme.cov_options(objective.dim())?)?;
    Ok((model, g))
}

/// Runs `samples` independent local-training replicas (reshuffled order)
/// and fits a Gaussian model to them, scaled by `1/(B·samples)`.
pub fn estimate_fedavg_distribution<T: Scalar, O: Objective<T> + ?Sized, R: Rng + ?Sized>(
    scheme: &UpdateScheme,
    objective: &O,
    theta: &[T],
    clip: T,
    samples: usize,
    rng: &mut R,
) -> Result<CovarianceModel<T>> {
    if samples < 2 {
        return Err(MechanismError::InvalidScheme(
            "FedAvg covariance estimation needs at least 2 samples".into(),
        ));
    }
    if objective.is_empty() {
        return Err(MechanismError::EmptyDataset);
    }
    Ok(fedavg_replicas(scheme, objective, theta, clip, samples, rng)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Wfdp,
    Wfna,
    Ddp,
    None,
}

/// Noise added on top of a user's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mechanism {
    /// Floor the spectrum at `floor` and release a Gaussian sample.
    Wfdp { floor: f64 },
    /// Add `N(0, ΔΣ)` to the raw update.
    Wfna { floor: f64 },
    /// Isotropic share of an aggregate variance `total_variance`, split over
    /// `users`.
    Ddp { total_variance: f64, users: u64 },
    None,
}

impl Mechanism {
    pub fn provenance(&self) -> Provenance {
        match self {
            Self::Wfdp { .. } => Provenance::Wfdp,
            Self::Wfna { .. } => Provenance::Wfna,
            Self::Ddp { .. } => Provenance::Ddp,
            Self::None => Provenance::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedUpdate<T> {
    /// Clipped-gradient scale; see [`NoisedUpdate::submitted`].
    pub x: Vec<T>,
    /// Total variance of the explicitly added noise.
    pub noise_trace: T,
    pub provenance: Provenance,
    /// Gaussian model of `x` for accounting (exact or approximate), `None`
    /// when no Gaussian description carries a guarantee.
    pub released: Option<CovarianceModel<T>>,
}

impl<T: Scalar> NoisedUpdate<T> {
    /// `−η x`, the vector sent to the aggregator.
    pub fn submitted(&self, learning_rate: f64) -> Vec<T> {
        let s = -T::of(learning_rate);
        self.x.iter().map(|&v| v * s).collect()
    }
}

/// Releases a fresh sample from the floored model of `model`.
pub fn wfdp_update<T: Scalar, R: Rng + ?Sized>(
    model: &CovarianceModel<T>,
    floor: T,
    rng: &mut R,
) -> Result<NoisedUpdate<T>> {
    let (floored, delta) = floor_eigenvalues(model, floor)?;
    let x = sample_gaussian(&floored, rng)?;
    Ok(NoisedUpdate {
        x,
        noise_trace: delta.trace(),
        provenance: Provenance::Wfdp,
        released: Some(floored),
    })
}

/// Zero-mean sample from `ΔΣ = floor(model) − model` and its trace.
pub fn wfna_noise<T: Scalar, R: Rng + ?Sized>(
    model: &CovarianceModel<T>,
    floor: T,
    rng: &mut R,
) -> Result<(Vec<T>, T)> {
    let (_, delta) = floor_eigenvalues(model, floor)?;
    Ok((sample_gaussian(&delta, rng)?, delta.trace()))
}

/// Isotropic `N(0, σ²/N · I_d)`.
pub fn ddp_noise<T: Scalar, R: Rng + ?Sized>(sigma2: T, users: u64, d: usize, rng: &mut R) -> Vec<T> {
    let sd = (sigma2 / T::of(users.max(1) as f64)).sqrt();
    (0..d)
        .map(|_| {
            let z = T::standard_normal(rng);
            if sd == T::zero() {
                T::zero()
            } else {
                sd * z
            }
        })
        .collect()
}

/// Applies `mechanism` to a raw update.
pub fn apply_mechanism<T: Scalar, R: Rng + ?Sized>(
    mechanism: &Mechanism,
    scheme: SchemeKind,
    raw: &RawUpdate<T>,
    rng: &mut R,
) -> Result<NoisedUpdate<T>> {
    match *mechanism {
        Mechanism::Wfdp { floor } => wfdp_update(&raw.model, T::of(floor), rng),
        Mechanism::Wfna { floor } => {
            let (noise, trace) = wfna_noise(&raw.model, T::of(floor), rng)?;
            let mut x = raw.x.clone();
            linalg::axpy(&mut x, T::one(), &noise);
            // Raw IID or full-batch updates are not Gaussian: no guarantee.
            let released = if scheme == SchemeKind::GaussianSampled {
                Some(floor_eigenvalues(&raw.model, T::of(floor))?.0)
            } else {
                None
            };
            Ok(NoisedUpdate {
                x,
                noise_trace: trace,
                provenance: Provenance::Wfna,
                released,
            })
        }
        Mechanism::Ddp { total_variance, users } => {
            let d = raw.x.len();
            let noise = ddp_noise(T::of(total_variance), users, d, rng);
            let mut x = raw.x.clone();
            linalg::axpy(&mut x, T::one(), &noise);
            let share = T::of(total_variance / users.max(1) as f64);
            let cov = raw.model.covariance().add(&linalg::Matrix::from_diagonal(&vec![share; d]));
            let released = Some(CovarianceModel::from_covariance(raw.model.mean.clone(), &cov)?);
            Ok(NoisedUpdate {
                x,
                noise_trace: share * T::of(d as f64),
                provenance: Provenance::Ddp,
                released,
            })
        }
        Mechanism::None => Ok(NoisedUpdate {
            x: raw.x.clone(),
            noise_trace: T::zero(),
            provenance: Provenance::None,
            released: Some(raw.model.clone()),
        }),
    }
}

/// `Σ_j max(0, σ² − λ_j)`.
pub fn water_filling_trace<T: Scalar>(eigvals: &[T], floor: T) -> T {
    // d·σ² minus the part already covered, so the isotropic bound holds
    // exactly in floating point.
    let covered = eigvals
        .iter()
        .fold(T::zero(), |acc, &l| acc + l.max(T::zero()).min(floor));
    T::of(eigvals.len() as f64) * floor - covered
}
