//! Keyed, domain-separated pseudorandom streams.
//!
//! Every stream is ChaCha20 keyed by `SHA-256(tag || seed || label)`, so the
//! same `(seed, label)` always reproduces the same stream and distinct labels
//! give unrelated streams.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::masking::OpId;
use crate::ring::{QuantParams, RingMatrix};

const DOMAIN_TAG: &[u8] = b"remo/prg/v1";

/// Domain label selecting an independent stream under one key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    /// Child key for one client session.
    Session { session: u64 },
    /// Setup-time public base for one weight matrix. `attempt` counts
    /// regenerations after a rank failure.
    PublicBase { op: OpId, attempt: u32 },
    /// Per-step private mixing matrix.
    StepMask { session: u64, step: u32, op: OpId },
    /// Extra sketches produced through the single-issue bypass.
    BypassBase { op: OpId, nonce: u32 },
}

impl Label {
    fn to_bytes(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24);
        match self {
            Label::Session { session } => {
                out.push(1);
                out.extend_from_slice(&session.to_le_bytes());
            }
            Label::PublicBase { op, attempt } => {
                out.push(2);
                out.extend_from_slice(&op.0.to_le_bytes());
                out.extend_from_slice(&attempt.to_le_bytes());
            }
            Label::StepMask { session, step, op } => {
                out.push(3);
                out.extend_from_slice(&session.to_le_bytes());
                out.extend_from_slice(&step.to_le_bytes());
                out.extend_from_slice(&op.0.to_le_bytes());
            }
            Label::BypassBase { op, nonce } => {
                out.push(4);
                out.extend_from_slice(&op.0.to_le_bytes());
                out.extend_from_slice(&nonce.to_le_bytes());
            }
        }
        out
    }
}

/// A 256-bit secret seed.
#[derive(Clone, PartialEq, Eq)]
pub struct PrgKey {
    seed: [u8; 32],
}

impl std::fmt::Debug for PrgKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PrgKey(..)")
    }
}

impl PrgKey {
    pub fn new(seed: [u8; 32]) -> Self {
        PrgKey { seed }
    }

    /// Expand a small integer seed into a key. Reproducible experiments only.
    pub fn from_u64(seed: u64) -> Self {
        let digest = Sha256::new()
            .chain_update(b"remo/seed/v1")
            .chain_update(seed.to_le_bytes())
            .finalize();
        PrgKey { seed: digest.into() }
    }

    pub fn stream(&self, label: Label) -> ChaCha20Rng {
        let digest = Sha256::new()
            .chain_update(DOMAIN_TAG)
            .chain_update(self.seed)
            .chain_update(label.to_bytes())
            .finalize();
        ChaCha20Rng::from_seed(digest.into())
    }

    pub fn derive(&self, label: Label) -> PrgKey {
        let mut seed = [0u8; 32];
        self.stream(label).fill_bytes(&mut seed);
        PrgKey { seed }
    }

    /// Matrix with entries uniform over the whole ring.
    pub fn uniform_matrix(
        &self,
        label: Label,
        rows: usize,
        cols: usize,
        params: QuantParams,
    ) -> RingMatrix {
        let mut rng = self.stream(label);
        RingMatrix::from_fn(rows, cols, params, |_, _| rng.next_u64())
    }
}
