//! Named, seeded random streams.
//!
//! Every consumer draws from its own stream, seeded by SHA-256 over the
//! master seed and the stream label. Streams therefore depend only on
//! `(master seed, label, draw count)` and are stable across platforms.

use std::collections::BTreeSet;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

const DOMAIN_TAG: &[u8] = b"vcosim/rng/v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RngError {
    #[error("rng stream label `{0}` derived twice in one run")]
    DuplicateLabel(String),
    #[error("rng stream label must be non-empty")]
    EmptyLabel,
}

#[derive(Clone, Debug)]
pub struct RngStream {
    label: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn label(&self) -> &str {
        &self.label
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn stream_seed(master_seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(DOMAIN_TAG);
    h.update(master_seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

/// Stream for `label` under `master_seed`. Does not track duplicates; use
/// [`RngRegistry`] inside a run.
pub fn derive_rng(master_seed: u64, label: &str) -> RngStream {
    RngStream { label: label.to_string(), rng: ChaCha8Rng::from_seed(stream_seed(master_seed, label)) }
}

/// Hands out streams for one run and rejects duplicate labels.
#[derive(Debug)]
pub struct RngRegistry {
    master_seed: u64,
    labels: BTreeSet<String>,
}

impl RngRegistry {
    pub fn new(master_seed: u64) -> Self {
        RngRegistry { master_seed, labels: BTreeSet::new() }
    }

    pub fn derive(&mut self, label: &str) -> Result<RngStream, RngError> {
        if label.is_empty() {
            return Err(RngError::EmptyLabel);
        }
        if !self.labels.insert(label.to_string()) {
            return Err(RngError::DuplicateLabel(label.to_string()));
        }
        Ok(derive_rng(self.master_seed, label))
    }

    /// Labels handed out so far, sorted.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }
}
