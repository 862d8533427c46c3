//! Seeded random streams.
//!
//! Every random decision in the crate flows from a single master seed
//! through named sub-streams, so individual components stay reproducible
//! even when the call order around them changes.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 32-byte ChaCha seed from the master seed and a stream name.
fn derive_seed(master: u64, name: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(name.as_bytes());
    hasher.finalize().into()
}

/// A deterministic RNG for the named sub-stream of `master`.
pub fn substream(master: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(master, name))
}

/// A derived `u64` seed for handing to APIs that take a plain seed.
pub fn substream_seed(master: u64, name: &str) -> u64 {
    let bytes = derive_seed(master, name);
    u64::from_le_bytes(bytes[..8].try_into().unwrap())
}
