//! Seed derivation and random streams.
//!
//! Every random quantity descends from one 64-bit root seed. A child seed is
//! `derive_seed(root, tag, index)`: the tag names the consumer (a string hashed
//! with FNV-1a) and the index is the replicate, shell or site number. The mix
//! is two rounds of the splitmix64 finalizer, so children are independent of
//! the order in which they are requested.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a tag string.
pub const fn tag(name: &str) -> u64 {
    let bytes = name.as_bytes();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut i = 0;
    while i < bytes.len() {
        h ^= bytes[i] as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
        i += 1;
    }
    h
}

pub fn derive_seed(root: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ splitmix64(tag)) ^ index.wrapping_mul(GOLDEN))
}

/// Main stream type for samplers and replicates.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_stream(root: u64, tag: u64, index: u64) -> ChaCha8Rng {
    stream(derive_seed(root, tag, index))
}

/// Cheap stream for the very many short-lived per-site generators of the
/// lazily sampled lattice.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }
}

impl RngCore for SplitMix64 {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

/// Uniform in [0, 1) with 53 random bits.
pub fn unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in (0, 1].
pub fn unit_open0<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    1.0 - unit(rng)
}

/// Poisson variate. Inversion for small means, `rand_distr` above that.
pub fn poisson<R: RngCore + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    if mean < 30.0 {
        let mut p = (-mean).exp();
        let mut cdf = p;
        let u = unit(rng);
        let mut k = 0u64;
        while u >= cdf {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
            if p < 1e-300 && cdf >= 1.0 - 1e-15 {
                break;
            }
        }
        k
    } else {
        use rand_distr::Distribution;
        let d = rand_distr::Poisson::new(mean).expect("finite positive mean");
        d.sample(rng) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_and_repeat() {
        let a = derive_seed(1, tag("x"), 0);
        assert_eq!(a, derive_seed(1, tag("x"), 0));
        assert_ne!(a, derive_seed(1, tag("x"), 1));
        assert_ne!(a, derive_seed(1, tag("y"), 0));
        assert_ne!(a, derive_seed(2, tag("x"), 0));
    }

    #[test]
    fn poisson_mean_small_and_large() {
        let mut rng = stream(3);
        for &m in &[0.2, 4.0, 80.0] {
            let n = 20000;
            let s: u64 = (0..n).map(|_| poisson(&mut rng, m)).sum();
            let mean = s as f64 / n as f64;
            assert!((mean - m).abs() < 5.0 * (m / n as f64).sqrt(), "{m} {mean}");
        }
        assert_eq!(poisson(&mut rng, 0.0), 0);
    }

    #[test]
    fn unit_is_in_range() {
        let mut rng = SplitMix64::new(9);
        for _ in 0..10000 {
            let u = unit(&mut rng);
            assert!((0.0..1.0).contains(&u));
            assert!(unit_open0(&mut rng) > 0.0);
        }
    }
}
