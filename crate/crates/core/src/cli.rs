//! Command-line front end: `simulate`, `account`, `spectrum`, `verify` and
//! `compose`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{
    account_round, compose, optimize_alpha, AccountantError, AlphaGrid, ClosedFormMode, Composition, CompositionMode,
    LedgerReport, PrivacyParams, RdpVariant, RoundBound, RoundLedger, Route,
};
use crate::fedsim::{write_metrics_csv, FedsimError, MechanismKind, Role, SimConfig, Simulation};
use crate::spectra::{floor_eigenvalues, CovarianceModel};
use crate::verify::{
    advantage_bound, build_counterexample, certify_closed_form, certify_rdp, DistinguisherResult, Soundness, Verdict,
};
use crate::seeding::derive_rng;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 3,
            Self::Verification(_) => 4,
        }
    }
}

impl From<FedsimError> for CliError {
    fn from(e: FedsimError) -> Self {
        match e {
            FedsimError::Config(_)
            | FedsimError::MalformedCsv { .. }
            | FedsimError::TooFewExamples { .. }
            | FedsimError::Accountant(_) => Self::Config(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<AccountantError> for CliError {
    fn from(e: AccountantError) -> Self {
        Self::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "aggnoise", version, about = "Privacy accounting for securely aggregated federated updates")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true, env = "AGGNOISE_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "AGGNOISE_SEED")]
    pub seed: Option<u64>,
    /// Output directory for reports.
    #[arg(long, global = true, env = "AGGNOISE_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, env = "AGGNOISE_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a federated training simulation with per-round accounting.
    Simulate(SimulateArgs),
    /// Evaluate an accountant route from parameters alone.
    Account(AccountArgs),
    /// Dump eigenvalue tables before and after flooring.
    Spectrum(SpectrumArgs),
    /// Run the soundness suites and the counterexample demo.
    Verify(VerifyArgs),
    /// Merge ledgers from several runs.
    Compose(ComposeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RouteArg {
    Closed,
    ClosedIid,
    ClosedSingular,
    Theorem1Rdp,
    WfdpA,
    WfdpB,
    Gaussian,
}

impl From<RouteArg> for Route {
    fn from(r: RouteArg) -> Self {
        match r {
            RouteArg::Closed => Route::ClosedForm(ClosedFormMode::General),
            RouteArg::ClosedIid => Route::ClosedForm(ClosedFormMode::Iid),
            RouteArg::ClosedSingular => Route::ClosedForm(ClosedFormMode::Singular),
            RouteArg::Theorem1Rdp => Route::Rdp(RdpVariant::Theorem1Rdp),
            RouteArg::WfdpA => Route::Rdp(RdpVariant::WfdpA),
            RouteArg::WfdpB => Route::Rdp(RdpVariant::WfdpB),
            RouteArg::Gaussian => Route::Rdp(RdpVariant::GaussianMechanism),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Simple,
    Rdp,
}

impl From<ModeArg> for CompositionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Simple => CompositionMode::Simple,
            ModeArg::Rdp => CompositionMode::Rdp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MechanismArg {
    Wfdp,
    Wfna,
    Ddp,
    None,
}

impl From<MechanismArg> for MechanismKind {
    fn from(m: MechanismArg) -> Self {
        match m {
            MechanismArg::Wfdp => MechanismKind::Wfdp,
            MechanismArg::Wfna => MechanismKind::Wfna,
            MechanismArg::Ddp => MechanismKind::Ddp,
            MechanismArg::None => MechanismKind::None,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub rounds: Option<u64>,
    #[arg(long)]
    pub sensitive_users: Option<usize>,
    #[arg(long)]
    pub non_sensitive_users: Option<usize>,
    #[arg(long, value_enum)]
    pub mechanism: Option<MechanismArg>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long, value_enum)]
    pub route: Option<RouteArg>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_enum)]
    pub composition: Option<ModeArg>,
    /// Repeat the run for each non-sensitive user count and write `sweep.csv`.
    #[arg(long, value_delimiter = ',')]
    pub sweep_users: Vec<usize>,
    /// Repeat the run for each σ² and write `sweep.csv`.
    #[arg(long, value_delimiter = ',')]
    pub sweep_sigma2: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct AccountArgs {
    #[arg(long, value_enum, default_value = "closed")]
    pub route: RouteArg,
    /// λ_min of the aggregate covariance (Σλ_min for theorem1-rdp).
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long = "C", default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long = "B", default_value_t = 1)]
    pub batch: u64,
    #[arg(long = "D", default_value_t = 1)]
    pub local_size: u64,
    #[arg(long = "N", default_value_t = 1)]
    pub ns_users: u64,
    /// Floor standard deviation; the floor is σ².
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub delta0: f64,
    #[arg(long, default_value_t = 1.0)]
    pub q: f64,
    #[arg(long, default_value_t = 1)]
    pub rounds: u64,
    #[arg(long, value_enum, default_value = "rdp")]
    pub compose: ModeArg,
}

#[derive(Debug, Clone, Args)]
pub struct SpectrumArgs {
    /// Eigenvalues to floor when no configuration is given.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.02, 0.0])]
    pub eigenvalues: Vec<f64>,
    /// Floor σ²; defaults to the configuration's `sigma2`, else 0.04.
    #[arg(long)]
    pub floor: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    pub closed_trials: usize,
    #[arg(long, default_value_t = 500)]
    pub rdp_trials: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1.5, 2.0, 4.0])]
    pub alphas: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    pub distinguisher_trials: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ComposeArgs {
    /// Ledger documents written by `simulate`.
    #[arg(required = true)]
    pub ledgers: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "rdp")]
    pub mode: ModeArg,
    /// Defaults to the δ of the first ledger.
    #[arg(long)]
    pub delta: Option<f64>,
}

fn default_metrics() -> String {
    "metrics.csv".into()
}
fn default_ledger() -> String {
    "ledger.json".into()
}
fn default_manifest() -> String {
    "manifest.json".into()
}

/// File names under `--out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportPaths {
    #[serde(default = "default_metrics")]
    pub metrics: String,
    #[serde(default = "default_ledger")]
    pub ledger: String,
    #[serde(default = "default_manifest")]
    pub manifest: String,
}

impl Default for ReportPaths {
    fn default() -> Self {
        Self {
            metrics: default_metrics(),
            ledger: default_ledger(),
            manifest: default_manifest(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub simulation: SimConfig,
    #[serde(default)]
    pub reports: ReportPaths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    fn apply(&mut self, g: &GlobalArgs, a: &SimulateArgs) {
        let s = &mut self.simulation;
        if let Some(v) = g.seed {
            s.seed = v;
        }
        if let Some(v) = a.rounds {
            s.rounds = v;
        }
        if let Some(v) = a.sensitive_users {
            s.sensitive_users = v;
        }
        if let Some(v) = a.non_sensitive_users {
            s.non_sensitive_users = v;
        }
        if let Some(v) = a.mechanism {
            s.mechanism = v.into();
        }
        if let Some(v) = a.sigma2 {
            s.sigma2 = v;
        }
        if let Some(v) = a.clip {
            s.clip = v;
        }
        if let Some(v) = a.route {
            s.accountant.route = v.into();
        }
        if let Some(v) = a.delta {
            s.accountant.delta = v;
        }
        if let Some(v) = a.composition {
            s.accountant.composition = v.into();
        }
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(runtime)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(runtime)?;
    tmp.write_all(bytes).map_err(runtime)?;
    tmp.as_file().sync_all().map_err(runtime)?;
    tmp.persist(path).map_err(|e| runtime(e.error))?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(runtime)?;
    s.push(b'\n');
    Ok(s)
}

fn out_dir(g: &GlobalArgs) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn require_config(g: &GlobalArgs) -> Result<RunConfig> {
    match &g.config {
        Some(p) => RunConfig::load(p),
        None => Err(CliError::Config("--config is required for this command".into())),
    }
}

/// Final metric and composed ε of a finished run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub non_sensitive_users: usize,
    pub sigma2: f64,
    pub eval_metric: f64,
    pub eps_total: f64,
}

pub struct SimulationOutput {
    pub metrics_csv: Vec<u8>,
    pub ledger: LedgerReport,
    pub simulation: Simulation,
}

pub fn run_simulation(config: SimConfig) -> Result<SimulationOutput> {
    let mut sim = Simulation::new(config)?;
    sim.run()?;
    let mut csv = Vec::new();
    write_metrics_csv(sim.history(), &mut csv)?;
    let a = &sim.config().accountant;
    let ledger = sim.ledger().report(a.composition, a.delta)?;
    Ok(SimulationOutput {
        metrics_csv: csv,
        ledger,
        simulation: sim,
    })
}

pub fn cmd_simulate(g: &GlobalArgs, a: &SimulateArgs) -> Result<()> {
    let mut cfg = require_config(g)?;
    cfg.apply(g, a);
    cfg.simulation.validate()?;
    let out = out_dir(g);

    if !a.sweep_users.is_empty() || !a.sweep_sigma2.is_empty() {
        let users = if a.sweep_users.is_empty() {
            vec![cfg.simulation.non_sensitive_users]
        } else {
            a.sweep_users.clone()
        };
        let sigmas = if a.sweep_sigma2.is_empty() {
            vec![cfg.simulation.sigma2]
        } else {
            a.sweep_sigma2.clone()
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        for &n in &users {
            for &s2 in &sigmas {
                let mut c = cfg.simulation.clone();
                c.non_sensitive_users = n;
                c.sigma2 = s2;
                let r = run_simulation(c)?;
                let last = r.simulation.history().last().map(|h| h.eval_metric).unwrap_or(f64::NAN);
                let row = SweepRow {
                    non_sensitive_users: n,
                    sigma2: s2,
                    eval_metric: last,
                    eps_total: r.ledger.total_epsilon,
                };
                println!("ns_users={n} sigma2={s2} eval_metric={last:.6} eps_total={:.6}", row.eps_total);
                w.serialize(row).map_err(runtime)?;
            }
        }
        let bytes = w.into_inner().map_err(runtime)?;
        return write_atomic(&out.join("sweep.csv"), &bytes);
    }

    let r = run_simulation(cfg.simulation.clone())?;
    // Reports are produced in memory first so a failure leaves no partial set.
    let manifest = to_json(&r.simulation.manifest())?;
    let ledger = to_json(&r.ledger)?;
    write_atomic(&out.join(&cfg.reports.metrics), &r.metrics_csv)?;
    write_atomic(&out.join(&cfg.reports.ledger), &ledger)?;
    write_atomic(&out.join(&cfg.reports.manifest), &manifest)?;
    println!(
        "rounds={} total_epsilon={} mode={:?}",
        r.simulation.history().len(),
        r.ledger.total_epsilon,
        r.ledger.mode
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountReport {
    pub route: Route,
    pub params: PrivacyParams,
    pub lambda: Option<f64>,
    /// Per-round ε; for Rényi routes at the per-round optimal α.
    pub round_epsilon: f64,
    pub alpha: Option<f64>,
    pub rdp_epsilon: Option<f64>,
    pub composed: Composition,
}

pub fn cmd_account(a: &AccountArgs) -> Result<AccountReport> {
    let route: Route = a.route.into();
    let params = PrivacyParams {
        clip: a.clip,
        batch: a.batch,
        local_size: a.local_size,
        ns_users: a.ns_users,
        delta: a.delta,
        delta0: a.delta0,
        floor: a.sigma * a.sigma,
        sampling_ratio: a.q,
        rounds: a.rounds,
    };
    params.validate()?;
    let needs_lambda = !matches!(route, Route::Rdp(RdpVariant::WfdpA | RdpVariant::WfdpB));
    let lambda = match (needs_lambda, a.lambda) {
        (true, None) => return Err(CliError::Config("--lambda is required for this route".into())),
        (true, Some(l)) => l,
        (false, _) => 0.0,
    };
    let entry = account_round(1, lambda, &params, route)?;
    let (round_epsilon, alpha, rdp_epsilon) = match &entry.bound {
        RoundBound::Rdp { curve } => {
            let o = optimize_alpha(curve, a.delta, AlphaGrid::default())?;
            (o.epsilon, Some(o.alpha), Some(o.rdp_epsilon))
        }
        _ => (entry.epsilon().unwrap_or(f64::INFINITY), None, None),
    };
    let mut ledger = RoundLedger::default();
    for t in 1..=a.rounds {
        let mut e = entry.clone();
        e.round = t;
        ledger.push(e)?;
    }
    let composed = compose(&ledger, a.compose.into(), a.delta)?;
    Ok(AccountReport {
        route,
        params,
        lambda: needs_lambda.then_some(lambda),
        round_epsilon,
        alpha,
        rdp_epsilon,
        composed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub index: usize,
    pub eigenvalue: f64,
    pub floored: f64,
    pub delta: f64,
}

pub fn spectrum_rows(model: &CovarianceModel<f64>, floor: f64) -> Result<Vec<SpectrumRow>> {
    let (floored, _) = floor_eigenvalues(model, floor).map_err(runtime)?;
    Ok(model
        .eigvals
        .iter()
        .zip(&floored.eigvals)
        .enumerate()
        .map(|(index, (&eigenvalue, &f))| SpectrumRow {
            index,
            eigenvalue,
            floored: f,
            delta: f - eigenvalue,
        })
        .collect())
}

fn spectrum_csv(rows: &[SpectrumRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.into_inner().map_err(runtime)
}

pub fn cmd_spectrum(g: &GlobalArgs, a: &SpectrumArgs) -> Result<()> {
    let Some(path) = &g.config else {
        let mut eig = a.eigenvalues.clone();
        eig.sort_by(|x, y| y.total_cmp(x));
        let model = CovarianceModel::from_covariance(
            vec![0.0; eig.len()],
            &crate::linalg::Matrix::from_diagonal(&eig),
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        let bytes = spectrum_csv(&spectrum_rows(&model, a.floor.unwrap_or(0.04))?)?;
        return match &g.out {
            Some(dir) => write_atomic(&dir.join("spectrum.csv"), &bytes),
            None => std::io::stdout().write_all(&bytes).map_err(runtime),
        };
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.simulation.seed = s;
    }
    let floor = a.floor.unwrap_or(cfg.simulation.sigma2);
    let sim = Simulation::new(cfg.simulation)?;
    let models = sim.user_models()?;
    let out = out_dir(g);
    let mut ns = Vec::new();
    for (id, role, m) in &models {
        if m.pairs() != m.dim() {
            continue;
        }
        let bytes = spectrum_csv(&spectrum_rows(m, floor)?)?;
        write_atomic(&out.join(format!("spectrum_user_{id}.csv")), &bytes)?;
        if *role == Role::NonSensitive {
            ns.push(m.clone());
        }
    }
    if !ns.is_empty() {
        let sum = CovarianceModel::sum(&ns).map_err(runtime)?;
        let floored: Vec<CovarianceModel<f64>> = ns
            .iter()
            .map(|m| floor_eigenvalues(m, floor).map(|f| f.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(runtime)?;
        let fsum = CovarianceModel::sum(&floored).map_err(runtime)?;
        let rows: Vec<SpectrumRow> = sum
            .eigvals
            .iter()
            .zip(&fsum.eigvals)
            .enumerate()
            .map(|(index, (&e, &f))| SpectrumRow {
                index,
                eigenvalue: e,
                floored: f,
                delta: f - e,
            })
            .collect();
        write_atomic(&out.join("spectrum_aggregate.csv"), &spectrum_csv(&rows)?)?;
    }
    println!("wrote spectra for {} users to {}", models.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub name: String,
    pub instances: usize,
    pub violations: usize,
    pub min_margin: f64,
    pub verdict: Soundness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleSummary {
    pub unfloored_check: Verdict,
    pub unfloored: DistinguisherResult,
    pub floored_check: Verdict,
    pub floor: f64,
    pub gap: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub advantage_bound: f64,
    pub floored: DistinguisherResult,
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub suites: Vec<SuiteSummary>,
    pub counterexample: CounterexampleSummary,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.violations == 0)
            && self.counterexample.unfloored_check == Verdict::Violated
            && self.counterexample.within_bound
    }
}

fn summarize(name: &str, reports: &[crate::verify::DominanceReport]) -> SuiteSummary {
    let violations = reports.iter().filter(|r| !r.pass).count();
    SuiteSummary {
        name: name.to_string(),
        instances: reports.len(),
        violations,
        min_margin: reports.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min),
        verdict: if violations == 0 {
            Soundness::Sound
        } else {
            Soundness::Unsound
        },
    }
}

pub fn run_counterexample(seed: u64, trials: usize) -> Result<CounterexampleSummary> {
    let (floor, gap, delta) = (1.0, 0.1, 1e-5);
    let mut rng = derive_rng("counterexample", &[seed]);
    let ce = build_counterexample(8, gap, &mut rng).map_err(runtime)?;
    let unfloored = ce.distinguish(None, 1000, seed).map_err(runtime)?;
    let floored = ce.distinguish(Some(floor), trials, seed.wrapping_add(1)).map_err(runtime)?;
    let epsilon = ce.floored_epsilon(floor, delta).map_err(runtime)?;
    let bound = advantage_bound(epsilon, delta);
    Ok(CounterexampleSummary {
        unfloored_check: ce.check().map_err(runtime)?,
        unfloored,
        floored_check: ce.check_floored(floor).map_err(runtime)?,
        floor,
        gap,
        epsilon,
        delta,
        advantage_bound: bound,
        floored,
        within_bound: floored.advantage <= bound + 3.0 * floored.std_error,
    })
}

pub fn run_verify(seed: u64, a: &VerifyArgs) -> Result<VerifyReport> {
    let mut suites = vec![summarize(
        "closed_form",
        &certify_closed_form(a.closed_trials, seed).map_err(runtime)?,
    )];
    for v in [
        RdpVariant::Theorem1Rdp,
        RdpVariant::WfdpA,
        RdpVariant::WfdpB,
        RdpVariant::GaussianMechanism,
    ] {
        let c = certify_rdp(v, a.rdp_trials, &a.alphas, seed).map_err(runtime)?;
        suites.push(summarize(v.name(), &c.reports));
    }
    Ok(VerifyReport {
        seed,
        suites,
        counterexample: run_counterexample(seed, a.distinguisher_trials)?,
    })
}

pub fn cmd_verify(g: &GlobalArgs, a: &VerifyArgs) -> Result<()> {
    let report = run_verify(g.seed.unwrap_or(0), a)?;
    for s in &report.suites {
        println!(
            "{:<20} instances={:<6} violations={:<4} min_margin={:.3e} {:?}",
            s.name, s.instances, s.violations, s.min_margin, s.verdict
        );
    }
    let c = &report.counterexample;
    println!(
        "counterexample       unfloored={:?} success={}/{} floored={:?} advantage={:.4} bound={:.4}",
        c.unfloored_check, c.unfloored.successes, c.unfloored.trials, c.floored_check, c.floored.advantage, c.advantage_bound
    );
    if let Some(dir) = &g.out {
        write_atomic(&dir.join("verify.json"), &to_json(&report)?)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Verification("at least one suite reported a violation".into()))
    }
}

pub fn load_ledger(path: &Path) -> Result<LedgerReport> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn merge_ledgers(reports: &[LedgerReport], mode: CompositionMode, delta: Option<f64>) -> Result<LedgerReport> {
    let Some(first) = reports.first() else {
        return Err(CliError::Config("no ledgers given".into()));
    };
    let mut merged = RoundLedger {
        entries: Vec::new(),
        learning_rate: first.learning_rate,
    };
    for r in reports {
        let l = RoundLedger {
            entries: r.entries.clone(),
            learning_rate: r.learning_rate,
        };
        merged = merged.concat(&l);
    }
    Ok(merged.report(mode, delta.unwrap_or(first.delta))?)
}

pub fn cmd_compose(g: &GlobalArgs, a: &ComposeArgs) -> Result<()> {
    let reports = a.ledgers.iter().map(|p| load_ledger(p)).collect::<Result<Vec<_>>>()?;
    let merged = merge_ledgers(&reports, a.mode.into(), a.delta)?;
    println!(
        "rounds={} total_epsilon={} mode={:?}",
        merged.entries.len(),
        merged.total_epsilon,
        merged.mode
    );
    if let Some(dir) = &g.out {
        write_atomic(&dir.join("composed_ledger.json"), &to_json(&merged)?)?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(&cli.global, a),
        Command::Account(a) => {
            let r = cmd_account(a)?;
            match (r.alpha, r.rdp_epsilon) {
                (Some(alpha), Some(rdp)) => println!(
                    "route={:?} round_epsilon={:.6} alpha={alpha:.6} rdp_epsilon={rdp:.6}",
                    r.route, r.round_epsilon
                ),
                _ => println!("route={:?} round_epsilon={:.6}", r.route, r.round_epsilon),
            }
            println!(
                "rounds={} composed_epsilon={:.6} mode={:?} delta={:e}",
                a.rounds, r.composed.epsilon, r.composed.mode, r.composed.delta
            );
            for w in &r.composed.warnings {
                println!("warning: {w:?}");
            }
            if let Some(dir) = &cli.global.out {
                write_atomic(&dir.join("account.json"), &to_json(&r)?)?;
            }
            Ok(())
        }
        Command::Spectrum(a) => cmd_spectrum(&cli.global, a),
        Command::Verify(a) => cmd_verify(&cli.global, a),
        Command::Compose(a) => cmd_compose(&cli.global, a),
    }
}
