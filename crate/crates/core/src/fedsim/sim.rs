use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{generate_synthetic, holdout, load_csv, partition, Dataset, SyntheticSpec};
use super::model::{evaluate_model, GlobalModel, LocalObjective, ModelFamily};
use super::sa::SaChannel;
use super::{FedsimError, Result};
use crate::accountant::{
    account_round, compose, optimize_alpha, AlphaGrid, ClosedFormMode, CompositionMode, LedgerEntry, PrivacyParams,
    RoundBound, RoundLedger, Route,
};
use crate::mechanisms::{apply_mechanism, compute_update, Mechanism, UpdateScheme};
use crate::seeding::derive_rng;
use crate::spectra::CovarianceModel;
use crate::verify::{check_support, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Clips and wants a worst-case guarantee.
    Sensitive,
    /// Provides the noise that protects the sensitive users.
    NonSensitive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Wfdp,
    Wfna,
    Ddp,
    #[default]
    None,
}

fn default_holdout() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

fn default_shift() -> f64 {
    1.0
}

fn default_eval() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        header: bool,
        #[serde(default = "default_holdout")]
        eval_fraction: f64,
    },
    Synthetic {
        features: usize,
        per_user: usize,
        noise: f64,
        #[serde(default = "default_true")]
        iid: bool,
        #[serde(default = "default_shift")]
        shift: f64,
        #[serde(default = "default_eval")]
        eval_size: usize,
    },
}

fn default_route() -> Route {
    Route::ClosedForm(ClosedFormMode::General)
}

fn default_delta() -> f64 {
    1e-5
}

fn default_one() -> f64 {
    1.0
}

fn default_mode() -> CompositionMode {
    CompositionMode::Rdp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountantConfig {
    #[serde(default = "default_route")]
    pub route: Route,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub delta0: f64,
    #[serde(default = "default_one")]
    pub sampling_ratio: f64,
    #[serde(default = "default_mode")]
    pub composition: CompositionMode,
}

impl Default for AccountantConfig {
    fn default() -> Self {
        Self {
            route: default_route(),
            delta: default_delta(),
            delta0: 0.0,
            sampling_ratio: 1.0,
            composition: default_mode(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub family: ModelFamily,
    pub dataset: DatasetSource,
    pub sensitive_users: usize,
    pub non_sensitive_users: usize,
    pub clip: f64,
    pub rounds: u64,
    pub scheme: UpdateScheme,
    /// Scheme of sensitive users; defaults to `scheme`.
    #[serde(default)]
    pub sensitive_scheme: Option<UpdateScheme>,
    #[serde(default)]
    pub mechanism: MechanismKind,
    /// Eigenvalue floor σ² for WF-DP / WF-NA; per-user variance for DDP.
    #[serde(default)]
    pub sigma2: f64,
    #[serde(default)]
    pub accountant: AccountantConfig,
}

impl SimConfig {
    pub fn total_users(&self) -> usize {
        self.sensitive_users + self.non_sensitive_users
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FedsimError::Config(m.to_string()));
        if self.total_users() == 0 {
            return bad("at least one user is required");
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return bad("clip must be positive");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return bad("sigma2 must be non-negative");
        }
        if matches!(self.mechanism, MechanismKind::Wfdp | MechanismKind::Wfna | MechanismKind::Ddp) && self.sigma2 == 0.0
        {
            return bad("the selected mechanism needs sigma2 > 0");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn mechanism_for(&self, role: Role) -> Mechanism {
        let n = self.total_users() as u64;
        match (self.mechanism, role) {
            (MechanismKind::Wfdp, Role::NonSensitive) => Mechanism::Wfdp { floor: self.sigma2 },
            (MechanismKind::Wfna, Role::NonSensitive) => Mechanism::Wfna { floor: self.sigma2 },
            (MechanismKind::Ddp, _) => Mechanism::Ddp {
                total_variance: n as f64 * self.sigma2,
                users: n,
            },
            _ => Mechanism::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserState {
    pub id: u64,
    pub role: Role,
    pub data: Dataset,
    pub scheme: UpdateScheme,
    pub mechanism: Mechanism,
}

/// One row of the metrics table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub train_loss: f64,
    pub eval_metric: f64,
    pub lambda_min: f64,
    pub eps_round: f64,
    pub eps_cumulative: f64,
    pub noise_trace: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub rounds: u64,
    pub users: usize,
    pub version: String,
}

struct UserOutput {
    id: u64,
    role: Role,
    submitted: Vec<f64>,
    released: Option<CovarianceModel<f64>>,
    noise_trace: f64,
    /// Substitution differences of a sensitive user's update.
    differences: Vec<Vec<f64>>,
}

/// Per-user stream, independent of scheduling.
fn user_rng(seed: u64, round: u64, user: u64) -> ChaCha20Rng {
    derive_rng("user", &[seed, round, user])
}

pub struct Simulation {
    config: SimConfig,
    model: GlobalModel,
    users: Vec<UserState>,
    train: Dataset,
    eval: Dataset,
    ledger: RoundLedger,
    history: Vec<RoundRecord>,
    dataset_hash: String,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let n = config.total_users();
        let (shards, eval) = match &config.dataset {
            DatasetSource::Csv {
                path,
                header,
                eval_fraction,
            } => {
                let all = load_csv(path, *header)?;
                let (train, eval) = holdout(&all, *eval_fraction, &mut rng);
                (partition(&train, n, &mut rng)?, eval)
            }
            DatasetSource::Synthetic {
                features,
                per_user,
                noise,
                iid,
                shift,
                eval_size,
            } => {
                let spec = SyntheticSpec {
                    features: *features,
                    per_user: *per_user,
                    users: n,
                    task: config.family,
                    noise: *noise,
                    iid: *iid,
                    shift: *shift,
                    eval_size: *eval_size,
                };
                let s = generate_synthetic(&spec, &mut rng)?;
                (s.users, s.eval)
            }
        };
        Self::from_parts(config, shards, eval)
    }

    /// Uses pre-partitioned data; shard `i` goes to user `i` (sensitive users
    /// first).
    pub fn from_parts(config: SimConfig, shards: Vec<Dataset>, eval: Dataset) -> Result<Self> {
        config.validate()?;
        if shards.len() != config.total_users() {
            return Err(FedsimError::Config(format!(
                "{} shards for {} users",
                shards.len(),
                config.total_users()
            )));
        }
        let features = shards[0].features();
        let mut users = Vec::with_capacity(shards.len());
        for (i, data) in shards.into_iter().enumerate() {
            if data.features() != features {
                return Err(FedsimError::Config("users disagree on feature width".into()));
            }
            let role = if i < config.sensitive_users {
                Role::Sensitive
            } else {
                Role::NonSensitive
            };
            let scheme = match role {
                Role::Sensitive => config.sensitive_scheme.clone().unwrap_or_else(|| config.scheme.clone()),
                Role::NonSensitive => config.scheme.clone(),
            };
            scheme.validate(data.len())?;
            users.push(UserState {
                id: i as u64,
                role,
                mechanism: config.mechanism_for(role),
                data,
                scheme,
            });
        }
        let train = Dataset::concat(users.iter().map(|u| &u.data));
        let dataset_hash = {
            let mut h = Sha256::new();
            h.update(train.digest().as_bytes());
            h.update(eval.digest().as_bytes());
            hex::encode(h.finalize())
        };
        let ledger = RoundLedger {
            learning_rate: Some(config.scheme.learning_rate),
            ..RoundLedger::default()
        };
        Ok(Self {
            model: GlobalModel::zeros(config.family, features),
            config,
            users,
            train,
            eval,
            ledger,
            history: Vec::new(),
            dataset_hash,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn model(&self) -> &GlobalModel {
        &self.model
    }

    pub fn users(&self) -> &[UserState] {
        &self.users
    }

    pub fn ledger(&self) -> &RoundLedger {
        &self.ledger
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    pub fn eval_data(&self) -> &Dataset {
        &self.eval
    }

    pub fn train_data(&self) -> &Dataset {
        &self.train
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            seed: self.config.seed,
            config_hash: self.config.digest(),
            dataset_hash: self.dataset_hash.clone(),
            rounds: self.config.rounds,
            users: self.users.len(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    fn privacy_params(&self) -> PrivacyParams {
        let ns: Vec<&UserState> = self.users.iter().filter(|u| u.role == Role::NonSensitive).collect();
        let floor = match self.config.mechanism {
            MechanismKind::Wfdp | MechanismKind::Wfna => self.config.sigma2,
            _ => 0.0,
        };
        let a = &self.config.accountant;
        PrivacyParams {
            clip: self.config.clip,
            batch: self.config.scheme.batch as u64,
            local_size: ns.iter().map(|u| u.data.len()).min().unwrap_or(1).max(1) as u64,
            ns_users: ns.len().max(1) as u64,
            delta: a.delta,
            delta0: a.delta0,
            floor,
            sampling_ratio: a.sampling_ratio,
            rounds: self.config.rounds,
        }
    }

    fn user_update(&self, u: &UserState, round: u64) -> Result<UserOutput> {
        let mut rng = user_rng(self.config.seed, round, u.id);
        let obj = LocalObjective {
            family: self.config.family,
            data: &u.data,
        };
        let raw = compute_update(&u.scheme, &obj, &self.model.theta, self.config.clip, &mut rng)?;
        let noised = apply_mechanism(&u.mechanism, u.scheme.kind, &raw, &mut rng)?;
        let differences = if u.role == Role::Sensitive {
            // Replacing example j by one with zero gradient, or by example k.
            let cols = raw.gradients.columns();
            let mut d: Vec<Vec<f64>> = cols.to_vec();
            for pair in cols.windows(2) {
                d.push(crate::linalg::sub_vec(&pair[0], &pair[1]));
            }
            d
        } else {
            Vec::new()
        };
        Ok(UserOutput {
            id: u.id,
            role: u.role,
            submitted: noised.submitted(u.scheme.learning_rate),
            released: noised.released,
            noise_trace: noised.noise_trace,
            differences,
        })
    }

    /// Distributions the users' next updates are drawn from, before any
    /// mechanism is applied.
    pub fn user_models(&self) -> Result<Vec<(u64, Role, CovarianceModel<f64>)>> {
        let round = self.model.round + 1;
        self.users
            .par_iter()
            .map(|u| {
                let mut rng = user_rng(self.config.seed, round, u.id);
                let obj = LocalObjective {
                    family: self.config.family,
                    data: &u.data,
                };
                let raw = compute_update(&u.scheme, &obj, &self.model.theta, self.config.clip, &mut rng)?;
                Ok((u.id, u.role, raw.model))
            })
            .collect()
    }

    fn infinite(round: u64, cause: impl Into<String>, p: &PrivacyParams) -> LedgerEntry {
        LedgerEntry {
            round,
            lambda_min: 0.0,
            bound: RoundBound::Infinite { cause: cause.into() },
            noise_trace: 0.0,
            params: *p,
        }
    }

    fn account(&self, round: u64, outputs: &[UserOutput]) -> Result<LedgerEntry> {
        let p = self.privacy_params();
        let route = self.config.accountant.route;
        let ns: Vec<&UserOutput> = outputs.iter().filter(|o| o.role == Role::NonSensitive).collect();
        if ns.is_empty() {
            return Ok(Self::infinite(round, "no non-sensitive users", &p));
        }
        let Some(models) = ns.iter().map(|o| o.released.as_ref()).collect::<Option<Vec<_>>>() else {
            return Ok(Self::infinite(
                round,
                "non-sensitive updates have no Gaussian description under this scheme",
                &p,
            ));
        };
        let sum = CovarianceModel::sum(models)?;
        let (lambda, singular) = if sum.is_nonsingular() {
            (sum.lambda_min(), false)
        } else {
            let diffs: Vec<Vec<f64>> = outputs.iter().flat_map(|o| o.differences.iter().cloned()).collect();
            match check_support(&diffs, &sum)? {
                Verdict::Satisfied => match sum.lambda_min_nonzero() {
                    Some(l) => (l, true),
                    None => return Ok(Self::infinite(round, "VIOLATED: aggregate covariance is zero", &p)),
                },
                Verdict::Violated => {
                    return Ok(Self::infinite(
                        round,
                        "VIOLATED: a sensitive update difference leaves the non-sensitive covariance support",
                        &p,
                    ))
                }
            }
        };
        let (route, lambda_in) = match route {
            Route::ClosedForm(ClosedFormMode::General) if singular => (Route::ClosedForm(ClosedFormMode::Singular), lambda),
            // The Rényi bound is stated on the 1/D-scaled second moment.
            Route::Rdp(crate::accountant::RdpVariant::Theorem1Rdp) => (route, lambda * p.batch as f64),
            _ => (route, lambda),
        };
        Ok(match account_round(round, lambda_in, &p, route) {
            Ok(mut e) => {
                e.lambda_min = lambda;
                e
            }
            Err(err) => {
                let mut e = Self::infinite(round, err.to_string(), &p);
                e.lambda_min = lambda;
                e
            }
        })
    }

    /// One FL round: local updates, secure aggregation, server step and
    /// accounting.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let round = self.model.round + 1;
        let outputs = self
            .users
            .par_iter()
            .map(|u| self.user_update(u, round))
            .collect::<Result<Vec<_>>>()?;

        let dim = self.model.theta.len();
        let mut channel = SaChannel::new(outputs.iter().map(|o| o.id).collect(), dim, self.config.seed, round);
        for o in &outputs {
            let ct = channel.encrypt(o.id, &o.submitted)?;
            channel.submit(ct)?;
        }
        let aggregate = channel.aggregate()?;
        self.model.apply(&aggregate, outputs.len());

        let mut entry = self.account(round, &outputs)?;
        entry.noise_trace = outputs.iter().map(|o| o.noise_trace).sum();
        let eps_round = match &entry.bound {
            RoundBound::Rdp { curve } => optimize_alpha(curve, self.config.accountant.delta, AlphaGrid::default())
                .map(|o| o.epsilon)
                .unwrap_or(f64::INFINITY),
            _ => entry.epsilon().unwrap_or(f64::INFINITY),
        };
        let lambda_min = entry.lambda_min;
        let noise_trace = entry.noise_trace;
        self.ledger.push(entry)?;
        let eps_cumulative = compose(
            &self.ledger,
            self.config.accountant.composition,
            self.config.accountant.delta,
        )?
        .epsilon;

        let train = evaluate_model(&self.model, &self.train)?;
        let eval = if self.eval.is_empty() {
            train
        } else {
            evaluate_model(&self.model, &self.eval)?
        };
        let rec = RoundRecord {
            round,
            train_loss: train.loss,
            eval_metric: eval.metric,
            lambda_min,
            eps_round,
            eps_cumulative,
            noise_trace,
        };
        self.history.push(rec);
        Ok(rec)
    }

    pub fn run(&mut self) -> Result<&[RoundRecord]> {
        while self.model.round < self.config.rounds {
            let r = self.run_round()?;
            log::info!(
                "round {} loss {:.6} metric {:.6} eps {:.4}",
                r.round,
                r.train_loss,
                r.eval_metric,
                r.eps_cumulative
            );
        }
        Ok(&self.history)
    }
}

/// Writes the metrics table with a header row.
pub fn write_metrics_csv<W: Write>(records: &[RoundRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| FedsimError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| FedsimError::Io(e.to_string()))?;
    Ok(())
}
