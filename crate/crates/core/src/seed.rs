use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a parent seed, a stream tag and an index.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = mix(seed);
    for b in tag.bytes() {
        h = mix(h ^ b as u64);
    }
    mix(h ^ index)
}

pub fn rng_for(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(7, "rollout", 0);
        assert_ne!(a, derive_seed(7, "rollout", 1));
        assert_ne!(a, derive_seed(7, "target", 0));
        assert_ne!(a, derive_seed(8, "rollout", 0));
        assert_eq!(a, derive_seed(7, "rollout", 0));
    }
}
