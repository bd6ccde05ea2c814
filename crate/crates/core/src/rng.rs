//! Deterministic pseudo-randomness built on the splitmix64 finalizer.
//!
//! Two flavors are provided:
//!
//! * counter-based: [`hash_key`] mixes a seed with a list of coordinate
//!   words, so every variate is addressable by its key and generation is
//!   order-independent (mask bits, weight init);
//! * sequential: [`SplitMix`] walks the splitmix64 sequence for the few
//!   places that want a stream (shuffles, synthetic rendering).

/// One splitmix64 step: gamma add followed by the finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a seed together with coordinate words into a single 64-bit value.
/// Bit-exact across platforms; changing any word changes the result.
#[inline]
pub fn hash_key(seed: u64, words: &[u64]) -> u64 {
    let mut h = mix64(seed);
    for &w in words {
        h = mix64(h ^ w);
    }
    h
}

/// Map 64 random bits to a uniform variate in [0, 1). The top 53 bits are
/// kept so the result is exactly representable and strictly below 1.
#[inline]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform variate in [0, 1) addressed by (seed, words).
#[inline]
pub fn keyed_unit(seed: u64, words: &[u64]) -> f64 {
    unit_f64(hash_key(seed, words))
}

/// Sequential splitmix64 stream.
#[derive(Debug, Clone)]
pub struct SplitMix {
    state: u64,
}

impl SplitMix {
    pub fn new(seed: u64) -> Self {
        SplitMix { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    pub fn below(&mut self, max: usize) -> usize {
        debug_assert!(max > 0);
        (self.next_u64() % max as u64) as usize
    }

    /// Standard normal variate via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Deterministic Fisher-Yates permutation of 0..n.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix::new(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        perm.swap(i, j);
    }
    perm
}
