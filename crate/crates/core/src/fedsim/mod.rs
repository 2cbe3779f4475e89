//! Desk-scale federated learning: users, updates, secure aggregation,
//! global model and per-round accounting.

mod data;
mod model;
mod sa;
mod sim;

use thiserror::Error;

pub use data::{generate_synthetic, holdout, load_csv, partition, read_csv, Dataset, SyntheticData, SyntheticSpec};
pub use model::{evaluate_model, GlobalModel, LocalObjective, Metrics, ModelFamily};
pub use sa::{
    decode_fixed_point, encode_fixed_point, secure_aggregate, Ciphertext, SaChannel, SaError, MAX_MAGNITUDE,
    SCALE_BITS,
};
pub use sim::{
    write_metrics_csv, AccountantConfig, DatasetSource, MechanismKind, Role, RoundRecord, RunManifest, SimConfig,
    Simulation, UserState,
};

use crate::accountant::AccountantError;
use crate::mechanisms::MechanismError;
use crate::spectra::SpectraError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedsimError {
    #[error("malformed CSV at line {line}: {reason}")]
    MalformedCsv { line: usize, reason: String },
    #[error("{have} examples cannot be split among {need} users")]
    TooFewExamples { have: usize, need: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Sa(#[from] SaError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
    #[error(transparent)]
    Verify(#[from] crate::verify::VerifyError),
}

pub type Result<T> = std::result::Result<T, FedsimError>;
