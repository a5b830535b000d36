//! Seed derivation.
//!
//! Every random stream in a run comes from one top-level seed:
//! `derive(seed, label)` is the first 8 bytes (little endian) of
//! `SHA-256(seed.to_le_bytes() || label)`. Labels in use are `"synth"`,
//! `"loo/<granularity>/<arch>/<n>"` and `"train"`. Within a leave-one-out run,
//! fold `i` trains with `derive(...) + i`.

use sha2::{Digest, Sha256};

pub fn derive(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
