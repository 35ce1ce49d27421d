//! The single pseudo-random generator used by every stage.
//!
//! SplitMix64: the state advances by the golden-gamma constant
//! `0x9E3779B97F4A7C15` and each output is the state passed through the
//! finalizer
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z =  z ^ (z >> 31)
//! ```
//!
//! Derived quantities:
//! - `next_f64`: top 53 bits scaled by 2^-53, in `[0, 1)`.
//! - `below(n)`: multiply-shift `(u64 * n) >> 64`.
//! - `normal`: Box-Muller on `(1 - next_f64, next_f64)`, cosine branch only.
//! - `shuffle`: Fisher-Yates from the last index down, `j = below(i + 1)`.
//!
//! Sub-seeds for pipeline stages are `root ^ stage_id` (see [`Stage`]).

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Independent child generator; consumes one draw.
    pub fn fork(&mut self) -> Self {
        Self::new(self.next_u64())
    }
}

/// Pipeline stages with their fixed sub-seed identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synth = 1,
    Split = 2,
    Feedback = 3,
    Teacher = 4,
    Student = 5,
    Eval = 6,
}

pub fn derive_seed(root: u64, stage: Stage) -> u64 {
    root ^ stage as u64
}
