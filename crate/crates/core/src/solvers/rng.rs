//! Counter-based random streams: one independent generator per `(seed, step, slot)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generator for one `(step, slot)` of a run seeded with `seed`.
pub fn stream(seed: u64, step: u64, slot: u64) -> ChaCha8Rng {
    let k = splitmix64(splitmix64(splitmix64(seed) ^ step) ^ slot);
    ChaCha8Rng::seed_from_u64(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, 1, 2).random();
        let b: u64 = stream(7, 1, 2).random();
        let c: u64 = stream(7, 2, 1).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
