//! Deterministic random number generation.
//!
//! Everything stochastic in this crate (weight init, data synthesis, batch
//! sampling, dropout) draws from [`Rng`], a SplitMix64 generator. SplitMix64
//! is a counter-based generator: the state advances by a fixed odd constant
//! and each output is a finalizing mix of the new counter value, so the
//! sequence for a given seed is identical on every platform and the full
//! generator state is a single `u64`.

/// SplitMix64 generator (Steele, Lea, Flood 2014).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Restores a generator captured with [`Rng::state`].
    pub fn from_state(state: u64) -> Self {
        Rng { state }
    }

    /// The full internal state; round-trips through [`Rng::from_state`].
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1), 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe to pass to `ln`.
    pub fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound). `bound` must be nonzero.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        // Desk-scale bounds make modulo bias negligible, but rejection
        // sampling keeps draws exactly uniform.
        let zone = u64::MAX - u64::MAX % bound as u64;
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % bound as u64) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller. The second branch value is
    /// discarded so the generator state stays a single `u64`.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Splits off an independent stream, e.g. one per dataset sample.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut mixer = Rng::new(self.state ^ stream.wrapping_mul(GAMMA | 1));
        let state = mixer.next_u64();
        Rng::from_state(state)
    }
}
