//! Pairwise additive masking for secure summation.
//!
//! Updates are encoded as 64-bit fixed-point integers and masked in the ring
//! of integers modulo 2^64, where pairwise masks cancel exactly in any
//! summation order. Each unordered client pair shares one seed per round; the
//! lexicographically smaller id adds the pair's pseudorandom stream and the
//! larger one subtracts it.

use std::collections::{BTreeMap, BTreeSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{FedError, Result};
use crate::model::ParameterVector;
use crate::seeding::derive_seed;

/// Fractional bits of the fixed-point encoding.
pub const FIXED_POINT_BITS: u32 = 32;
const FIXED_SCALE: f64 = (1u64 << FIXED_POINT_BITS) as f64;

/// Vector over Z/2^64.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingVector(pub Vec<u64>);

impl RingVector {
    pub fn zeros(dims: usize) -> Self {
        RingVector(vec![0; dims])
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn encode(values: &ParameterVector) -> Self {
        RingVector(
            values
                .as_slice()
                .iter()
                .map(|v| (v * FIXED_SCALE).round() as i64 as u64)
                .collect(),
        )
    }

    pub fn decode(&self) -> ParameterVector {
        ParameterVector::from_raw(
            self.0
                .iter()
                .map(|&v| v as i64 as f64 / FIXED_SCALE)
                .collect(),
        )
    }

    pub fn wrapping_add_assign(&mut self, other: &RingVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = a.wrapping_add(*b);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0)
    }
}

/// Sum in the given order with wrapping arithmetic.
pub fn ring_sum<'a>(vectors: impl IntoIterator<Item = &'a RingVector>) -> Option<RingVector> {
    let mut iter = vectors.into_iter();
    let mut acc = iter.next()?.clone();
    for v in iter {
        acc.wrapping_add_assign(v);
    }
    Some(acc)
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPairing {
    pub round: u64,
    cohort: BTreeSet<String>,
    seeds: BTreeMap<(String, String), u64>,
}

impl MaskPairing {
    pub fn new(round: u64) -> Self {
        Self {
            round,
            cohort: BTreeSet::new(),
            seeds: BTreeMap::new(),
        }
    }

    /// Sets the seed for an unordered pair. Returns false if the pair already
    /// had one; the first seed is kept.
    pub fn insert(&mut self, a: &str, b: &str, seed: u64) -> bool {
        use std::collections::btree_map::Entry;
        self.cohort.insert(a.to_string());
        self.cohort.insert(b.to_string());
        match self.seeds.entry(pair_key(a, b)) {
            Entry::Vacant(e) => {
                e.insert(seed);
                true
            }
            Entry::Occupied(_) => false,
        }
    }

    /// Every client id named by some pair.
    pub fn cohort(&self) -> impl Iterator<Item = &str> {
        self.cohort.iter().map(String::as_str)
    }

    pub fn seed(&self, a: &str, b: &str) -> Option<u64> {
        self.seeds.get(&pair_key(a, b)).copied()
    }

    /// Pair seeds for a cohort, derived from a secret shared by the cohort.
    pub fn derive(round: u64, cohort: &[String], cohort_secret: u64) -> Self {
        let mut pairing = Self::new(round);
        for (i, a) in cohort.iter().enumerate() {
            for b in &cohort[i + 1..] {
                let (lo, hi) = pair_key(a, b);
                let seed = derive_seed(
                    "fedmesh/mask-pair",
                    &[
                        &cohort_secret.to_le_bytes(),
                        &round.to_le_bytes(),
                        lo.as_bytes(),
                        hi.as_bytes(),
                    ],
                );
                pairing.insert(&lo, &hi, seed);
            }
        }
        pairing
    }
}

/// `mask(a) = sum_{b != a} sign(a,b) * PRG(seed(a,b))` over the pairing's
/// cohort.
pub fn make_masks(pairing: &MaskPairing, client_id: &str, dims: usize) -> Result<RingVector> {
    let mut mask = RingVector::zeros(dims);
    for other in pairing.cohort().filter(|b| *b != client_id) {
        let seed = pairing
            .seed(client_id, other)
            .ok_or_else(|| FedError::MissingPairSeed(client_id.to_string(), other.to_string()))?;
        let positive = client_id < other;
        let mut prg = ChaCha20Rng::seed_from_u64(seed);
        for m in mask.0.iter_mut() {
            let r = prg.next_u64();
            *m = if positive {
                m.wrapping_add(r)
            } else {
                m.wrapping_sub(r)
            };
        }
    }
    Ok(mask)
}

/// Fixed-point encoding of `values` plus the client's mask.
pub fn mask_vector(values: &ParameterVector, mask: &RingVector) -> Result<RingVector> {
    if values.dims() != mask.dims() {
        return Err(FedError::Dimension {
            expected: mask.dims(),
            got: values.dims(),
        });
    }
    let mut out = RingVector::encode(values);
    out.wrapping_add_assign(mask);
    Ok(out)
}
