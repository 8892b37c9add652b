//! Deterministic random streams.
//!
//! All randomness in the crate comes from ChaCha8 seeded with
//! `seed_from_u64(seed)`. Independent consumers of the same seed are kept
//! apart by selecting a ChaCha stream: the top byte holds a domain tag and the
//! low 56 bits an index (a record number, a boosting round, ...). Drawing
//! record `i` of domain `d` therefore never depends on how many other records
//! were drawn before it, which lets generation run in parallel chunks and
//! still produce identical output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags for substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Domain {
    Split = 1,
    Balance = 2,
    Noise = 3,
    Subsample = 4,
    InterceptProbe = 5,
    TrainTestCandidates = 6,
    ValidationCandidates = 7,
    GenericCandidates = 8,
    Shuffle = 9,
}

const INDEX_MASK: u64 = (1 << 56) - 1;

/// Main generator for `seed`, on stream 0.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Substream `index` of `domain` under `seed`.
pub fn substream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 56) | (index & INDEX_MASK));
    rng
}
