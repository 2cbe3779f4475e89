//! Privacy accounting for the noise that secure aggregation leaves in
//! federated updates, plus the water-filling mechanism that tops it up.
//!
//! The numerical core ([`spectra`], [`mechanisms`]) is generic over
//! [`Scalar`] (`f32` or `f64`); the root re-exports `f64` aliases.

pub mod accountant;
pub mod cli;
pub mod fedsim;
pub mod linalg;
pub mod mechanisms;
pub mod scalar;
pub mod seeding;
pub mod spectra;
pub mod verify;

pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type CovarianceModel = spectra::CovarianceModel<f64>;
pub type GradientMatrix = spectra::GradientMatrix<f64>;
pub type NoisedUpdate = mechanisms::NoisedUpdate<f64>;
pub type RawUpdate = mechanisms::RawUpdate<f64>;
