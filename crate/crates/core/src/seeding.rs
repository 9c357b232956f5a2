//! Independent deterministic random streams.
//!
//! Every stochastic stage draws from its own stream keyed by `(base seed,
//! stage label, item key)`, so changing one stage's rates never shifts the
//! draws another stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn derive_seed(base: u64, stage: &str, key: &str) -> u64 {
    let mut h = splitmix64(base);
    h = splitmix64(h ^ fnv1a(stage.as_bytes()));
    splitmix64(h ^ fnv1a(key.as_bytes()))
}

pub fn stream(base: u64, stage: &str, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stage, key))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct_and_stable() {
        assert_eq!(derive_seed(1, "a", "x"), derive_seed(1, "a", "x"));
        assert_ne!(derive_seed(1, "a", "x"), derive_seed(1, "b", "x"));
        assert_ne!(derive_seed(1, "a", "x"), derive_seed(2, "a", "x"));
        assert_ne!(derive_seed(1, "a", "x"), derive_seed(1, "a", "y"));
    }
}
