//! Counter-based deterministic uniforms.
//!
//! Every draw is a pure function of `(seed, stream, step, layer, neuron)`, so
//! decisions replay identically regardless of thread scheduling or the order
//! in which neurons are visited. The mixer is the SplitMix64 finalizer applied
//! once per key word; it uses only integer arithmetic and so is bit-identical
//! on every platform.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Keyed counter-based generator. Holds only the seed; no mutable state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub const fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// 64 pseudo-random bits for the given key words.
    #[inline]
    pub fn bits(&self, key: &[u64]) -> u64 {
        let mut h = mix64(self.seed.wrapping_add(GOLDEN));
        for (i, &w) in key.iter().enumerate() {
            let tagged = w.wrapping_add((i as u64 + 1).wrapping_mul(GOLDEN));
            h = mix64(h ^ mix64(tagged));
        }
        h
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&self, key: &[u64]) -> f64 {
        (self.bits(key) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}
