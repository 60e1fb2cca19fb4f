//! Deterministic random number generation.
//!
//! Everything stochastic in this crate (weight init, shuffling, augmentation,
//! synthetic data) draws from [`Rng`], a splitmix64 generator. The sequence is
//! fully determined by the seed and identical on every platform, which is what
//! makes full-run reruns byte-for-byte reproducible.
//!
//! Derived streams are produced by XOR-ing a seed with [`fnv1a64`] of a label
//! string (e.g. a parameter key or a sample id), so independent consumers can
//! draw without coordinating a shared cursor.

/// splitmix64 (Steele, Lea, Flood 2014). State advances by the golden-ratio
/// increment; output is the finalizer of the new state.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be positive. Uses a plain modulo;
    /// the bias is negligible for the desk-scale ranges used here.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below requires n > 0");
        (self.next_u64() % n as u64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// A generator for the derived stream `seed XOR fnv1a64(label)`.
    pub fn derive(seed: u64, label: &str) -> Self {
        Rng::new(seed ^ fnv1a64(label))
    }
}

/// 64-bit FNV-1a hash over the UTF-8 bytes of `s`.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
