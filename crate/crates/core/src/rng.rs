//! Seed derivation for independent random streams.
//!
//! Each consumer of randomness gets its own ChaCha8 stream keyed by
//! `(master_seed, domain, a, b)`. Streams never share state, so the order in
//! which clients are trained has no influence on what any of them draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. The discriminant is folded into the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Partition,
    Energy,
    /// Participant selection; keyed by round.
    Participants,
    /// Subsampling and shuffling for one client in one round.
    ClientRound,
    Synthetic,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Partition => 0x7061_7274,
            Domain::Energy => 0x656e_6572,
            Domain::Participants => 0x7061_7274_6963,
            Domain::ClientRound => 0x636c_6965_6e74,
            Domain::Synthetic => 0x7379_6e74,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes the components into one 64-bit seed. Stable across platforms and releases.
pub fn derive_seed(master_seed: u64, domain: Domain, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(master_seed);
    for word in [domain.tag(), a, b] {
        h = splitmix64(h ^ word);
    }
    h
}

pub fn stream(master_seed: u64, domain: Domain, a: u64, b: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master_seed, domain, a, b))
}
