//! Seed derivation so every random stream is a pure function of the single
//! experiment seed plus its role (epoch, batch index, ...).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and a path of components.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut acc = mix(base ^ 0x9E37_79B9_7F4A_7C15);
    for &p in parts {
        acc = mix(acc ^ p.wrapping_mul(0x2545_F491_4F6C_DD1D));
    }
    acc
}

pub fn rng_from(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}
