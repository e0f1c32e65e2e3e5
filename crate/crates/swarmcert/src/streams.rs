//! Counter-based random streams. Every draw is addressed by a root seed, a
//! subsystem tag and entity indices, so changing the policy (and therefore
//! the order of draws) never changes what any one entity sees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const PROCESS: u64 = 1;
pub const MEASURE: u64 = 2;
pub const FADING: u64 = 3;
pub const SHADOW: u64 = 4;
pub const GUST: u64 = 5;
pub const INITIAL: u64 = 6;
pub const ONBOARD: u64 = 7;
pub const PROBE: u64 = 8;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a key into one 64-bit value.
pub fn key(seed: u64, tag: u64, ids: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(tag));
    for &i in ids {
        h = splitmix(h ^ i.wrapping_mul(0xd6e8_feb8_6659_fd93));
    }
    h
}

pub fn stream(seed: u64, tag: u64, ids: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key(seed, tag, ids))
}

/// Uniform draw in the open interval (0, 1).
pub fn unit(seed: u64, tag: u64, ids: &[u64]) -> f64 {
    ((key(seed, tag, ids) >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

pub fn normal(seed: u64, tag: u64, ids: &[u64]) -> f64 {
    stream(seed, tag, ids).sample(StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_addressable() {
        assert_eq!(unit(1, FADING, &[3, 4]), unit(1, FADING, &[3, 4]));
        assert_ne!(unit(1, FADING, &[3, 4]), unit(1, FADING, &[4, 3]));
        assert_ne!(unit(1, FADING, &[3]), unit(1, SHADOW, &[3]));
        assert_ne!(unit(1, FADING, &[3]), unit(2, FADING, &[3]));
    }

    #[test]
    fn unit_is_uniform_enough() {
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|i| unit(9, PROBE, &[i])).collect();
        assert!(xs.iter().all(|&x| x > 0.0 && x < 1.0));
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 4.0 * (1.0 / 12.0 / n as f64).sqrt());
        let below = xs.iter().filter(|&&x| x < 0.1).count() as f64 / n as f64;
        assert!((below - 0.1).abs() < 4.0 * (0.09 / n as f64).sqrt());
    }
}
