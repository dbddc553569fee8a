//! Deterministic pseudo-random numbers.
//!
//! Every randomized step in this crate (parameter init, batch shuffling,
//! attack random starts, augmentation) draws from [`SplitMix64`] so that a
//! run is reproducible from its seed alone, independent of platform and of
//! any external RNG crate's version.

/// SplitMix64 generator. Small state, full 64-bit period, passes BigCrush.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derive an independent stream from a seed and a list of tags.
    ///
    /// Used to give each (purpose, epoch, batch) its own stream so that
    /// adding or removing one consumer never shifts another's draws.
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let mut rng = SplitMix64::new(seed);
        for &t in tags {
            let mixed = rng.next_u64() ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            rng = SplitMix64::new(mixed);
        }
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1). Uses the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). n must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is negligible for the small n used here.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller. Consumes two draws per value.
    pub fn normal(&mut self) -> f64 {
        // Offset keeps u1 strictly positive so ln(u1) is finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
