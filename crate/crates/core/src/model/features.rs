//! Hashed sparse features for the token tagger.
//!
//! Every token yields four feature families, each namespaced before hashing:
//! the lowercased token (`w:`), its character 3-grams over `^token$` (`c:`),
//! and the lowercased previous and next tokens (`p:`, `n:`), with `<s>` and
//! `</s>` at the sentence edges. Hashing is 64-bit FNV-1a over the seed's
//! little-endian bytes followed by the feature string, masked to the feature
//! dimension.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn hash_feature(seed: u64, mask: u64, prefix: &str, value: &str) -> u32 {
    let mut buf = Vec::with_capacity(prefix.len() + value.len());
    buf.extend_from_slice(prefix.as_bytes());
    buf.extend_from_slice(value.as_bytes());
    (fnv1a64(seed, &buf) & mask) as u32
}

/// Per-token sorted, deduplicated feature indices. `feature_dim` must be a
/// power of two.
pub fn featurize<S: AsRef<str>>(tokens: &[S], feature_dim: usize, hash_seed: u64) -> Vec<Vec<u32>> {
    debug_assert!(feature_dim.is_power_of_two());
    let mask = (feature_dim - 1) as u64;
    let lower: Vec<String> = tokens.iter().map(|t| t.as_ref().to_lowercase()).collect();

    lower
        .iter()
        .enumerate()
        .map(|(i, tok)| {
            let mut feats = Vec::with_capacity(tok.chars().count() + 3);
            feats.push(hash_feature(hash_seed, mask, "w:", tok));

            let padded: Vec<char> = std::iter::once('^')
                .chain(tok.chars())
                .chain(std::iter::once('$'))
                .collect();
            let mut gram = String::with_capacity(12);
            for w in padded.windows(3) {
                gram.clear();
                gram.extend(w);
                feats.push(hash_feature(hash_seed, mask, "c:", &gram));
            }

            let prev = if i == 0 { "<s>" } else { lower[i - 1].as_str() };
            let next = lower.get(i + 1).map_or("</s>", String::as_str);
            feats.push(hash_feature(hash_seed, mask, "p:", prev));
            feats.push(hash_feature(hash_seed, mask, "n:", next));

            feats.sort_unstable();
            feats.dedup();
            feats
        })
        .collect()
}
