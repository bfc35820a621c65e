//! Named deterministic RNG streams.
//!
//! A single run seed fans out into independent ChaCha8 streams keyed by a
//! purpose string plus integer ids (sample index, candidate index, epoch).
//! The stream key is `SHA-256("posealign.rng.v1" || seed_le || len(purpose)_le
//! || purpose || ids_le...)`, so changing one id touches exactly one stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const DOMAIN: &[u8] = b"posealign.rng.v1";

/// Independent RNG stream for `(seed, purpose, ids)`.
pub fn stream(seed: u64, purpose: &str, ids: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(DOMAIN);
    hasher.update(seed.to_le_bytes());
    hasher.update((purpose.len() as u64).to_le_bytes());
    hasher.update(purpose.as_bytes());
    for id in ids {
        hasher.update(id.to_le_bytes());
    }
    ChaCha8Rng::from_seed(hasher.finalize().into())
}
