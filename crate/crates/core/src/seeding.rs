//! Deterministic derivation of sub-seeds and RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Hashes a domain tag and parts into a 64-bit seed. Parts are length-prefixed
/// so `("ab", "c")` and `("a", "bc")` differ.
pub fn derive_seed(domain: &str, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update((domain.len() as u32).to_be_bytes());
    h.update(domain.as_bytes());
    for p in parts {
        h.update((p.len() as u32).to_be_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Independent stream for one client in one round.
pub fn client_round_seed(domain: &str, base: u64, client_id: &str, round: u64) -> u64 {
    derive_seed(
        domain,
        &[
            &base.to_le_bytes(),
            client_id.as_bytes(),
            &round.to_le_bytes(),
        ],
    )
}

pub fn client_round_rng(domain: &str, base: u64, client_id: &str, round: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(client_round_seed(domain, base, client_id, round))
}
