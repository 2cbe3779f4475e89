//! Toy secure aggregation: fixed-point encoding into `Z_{2^64}` plus
//! pairwise additive masks that cancel in the sum.
//!
//! The server side only ever sees [`Ciphertext`]s and the decoded aggregate.
//! Once submitted, a ciphertext cannot be read back out of the channel:
//!
//! ```compile_fail
//! use aggnoise::fedsim::SaChannel;
//! let mut ch = SaChannel::new(vec![0, 1], 1, 7, 0);
//! let ct = ch.encrypt(0, &[1.0]).unwrap();
//! ch.submit(ct).unwrap();
//! let _leak = &ch.submissions;
//! ```

use std::collections::BTreeMap;

use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::seeding::derive_rng;

pub const SCALE_BITS: u32 = 16;
const SCALE: f64 = (1u64 << SCALE_BITS) as f64;
/// Largest encodable magnitude, exclusive.
pub const MAX_MAGNITUDE: f64 = (1u64 << 31) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SaError {
    #[error("value {0} exceeds the fixed-point range")]
    Overflow(f64),
    #[error("participant {0} did not submit")]
    MissingParticipant(u64),
    #[error("user {0} is not a participant")]
    UnknownParticipant(u64),
    #[error("user {0} submitted twice")]
    DuplicateSubmission(u64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Round-to-nearest `x · 2^16` as a two's-complement ring element.
pub fn encode_fixed_point(x: &[f64]) -> Result<Vec<u64>, SaError> {
    x.iter()
        .map(|&v| {
            if !(v.abs() < MAX_MAGNITUDE) {
                return Err(SaError::Overflow(v));
            }
            Ok((v * SCALE).round() as i64 as u64)
        })
        .collect()
}

pub fn decode_fixed_point(v: &[u64]) -> Vec<f64> {
    v.iter().map(|&w| w as i64 as f64 / SCALE).collect()
}

/// A masked, encoded update. Its words are uniformly distributed in the ring
/// for any fixed plaintext.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    user: u64,
    words: Vec<u64>,
}

impl Ciphertext {
    pub fn user(&self) -> u64 {
        self.user
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }
}

/// One aggregation session among a fixed participant set.
#[derive(Debug)]
pub struct SaChannel {
    dim: usize,
    participants: Vec<u64>,
    seed: u64,
    round: u64,
    submissions: BTreeMap<u64, Ciphertext>,
}

impl SaChannel {
    pub fn new(mut participants: Vec<u64>, dim: usize, seed: u64, round: u64) -> Self {
        participants.sort_unstable();
        participants.dedup();
        Self {
            dim,
            participants,
            seed,
            round,
            submissions: BTreeMap::new(),
        }
    }

    pub fn participants(&self) -> &[u64] {
        &self.participants
    }

    fn pair_stream(&self, a: u64, b: u64) -> ChaCha20Rng {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        derive_rng("sa-pair", &[self.seed, self.round, lo, hi])
    }

    /// `Σ_{j>i} m_ij − Σ_{j<i} m_ji` for user `i`.
    fn mask(&self, user: u64) -> Vec<u64> {
        let mut mask = vec![0u64; self.dim];
        for &other in &self.participants {
            if other == user {
                continue;
            }
            let mut prg = self.pair_stream(user, other);
            for m in mask.iter_mut() {
                let w = prg.next_u64();
                *m = if user < other { m.wrapping_add(w) } else { m.wrapping_sub(w) };
            }
        }
        mask
    }

    /// Client side: encodes and masks `x`.
    pub fn encrypt(&self, user: u64, x: &[f64]) -> Result<Ciphertext, SaError> {
        if self.participants.binary_search(&user).is_err() {
            return Err(SaError::UnknownParticipant(user));
        }
        if x.len() != self.dim {
            return Err(SaError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let words = encode_fixed_point(x)?
            .into_iter()
            .zip(self.mask(user))
            .map(|(e, m)| e.wrapping_add(m))
            .collect();
        Ok(Ciphertext { user, words })
    }

    pub fn submit(&mut self, ct: Ciphertext) -> Result<(), SaError> {
        if self.participants.binary_search(&ct.user).is_err() {
            return Err(SaError::UnknownParticipant(ct.user));
        }
        if self.submissions.contains_key(&ct.user) {
            return Err(SaError::DuplicateSubmission(ct.user));
        }
        self.submissions.insert(ct.user, ct);
        Ok(())
    }

    /// Server side: ring sum of all ciphertexts, decoded.
    pub fn aggregate(self) -> Result<Vec<f64>, SaError> {
        if let Some(&u) = self
            .participants
            .iter()
            .find(|u| !self.submissions.contains_key(u))
        {
            return Err(SaError::MissingParticipant(u));
        }
        let mut acc = vec![0u64; self.dim];
        for ct in self.submissions.values() {
            for (a, &w) in acc.iter_mut().zip(&ct.words) {
                *a = a.wrapping_add(w);
            }
        }
        Ok(decode_fixed_point(&acc))
    }

    /// Ring sum of every participant's mask; zero by construction.
    pub fn mask_sum(&self) -> Vec<u64> {
        let mut acc = vec![0u64; self.dim];
        for &u in &self.participants {
            for (a, m) in acc.iter_mut().zip(self.mask(u)) {
                *a = a.wrapping_add(m);
            }
        }
        acc
    }
}

/// Runs one full session over `(user, update)` pairs.
pub fn secure_aggregate(updates: &[(u64, Vec<f64>)], seed: u64, round: u64) -> Result<Vec<f64>, SaError> {
    let dim = updates.first().map_or(0, |u| u.1.len());
    let mut ch = SaChannel::new(updates.iter().map(|u| u.0).collect(), dim, seed, round);
    for (user, x) in updates {
        let ct = ch.encrypt(*user, x)?;
        ch.submit(ct)?;
    }
    ch.aggregate()
}
