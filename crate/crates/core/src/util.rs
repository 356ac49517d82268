use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Round half up, tolerant of representation error right at the `.5` tie
/// (so `0.15 * 10` rounds to 2 even though it is computed as 1.4999...).
pub fn round_half_up(x: f64) -> usize {
    if x <= 0.0 {
        return 0;
    }
    (x + 0.5 + 1e-9).floor() as usize
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream seed from a parent seed and a salt.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding() {
        assert_eq!(round_half_up(3.0), 3);
        assert_eq!(round_half_up(0.3 * 10.0), 3);
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(0.15 * 10.0), 2);
        assert_eq!(round_half_up(0.49), 0);
        assert_eq!(round_half_up(0.25 * 12.0), 3);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
