//! Deterministic random source used in place of ambient randomness.
//!
//! A 64-bit LCG with Knuth's MMIX constants. Outputs are the top 53 bits of
//! the new state divided by 2^53, which is exactly what an in-page
//! `Math.random` replacement can reproduce with doubles, so the golden
//! vectors under `fixtures/detrand/` are shared with the page bundle.

use serde::{Deserialize, Serialize};

use crate::model::fnv1a64;

const SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;
const MULTIPLIER: u64 = 6_364_136_223_846_793_005;
const INCREMENT: u64 = 1_442_695_040_888_963_407;
const UNIT: f64 = (1u64 << 53) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DetRand {
    state: u64,
}

impl DetRand {
    /// `state = seed ^ 0x9E3779B97F4A7C15`, with an all-zero state remapped to 1.
    pub fn seed(seed: u64) -> Self {
        let state = seed ^ SEED_MIX;
        DetRand { state: if state == 0 { 1 } else { state } }
    }

    /// Independent stream for `label` under `seed`.
    pub fn substream(seed: u64, label: &str) -> Self {
        assert!(!label.is_empty(), "substream label must not be empty");
        DetRand::seed(fnv1a64(label.as_bytes()) ^ seed)
    }

    /// Restore a generator from a previously observed [`DetRand::state`].
    pub fn from_state(state: u64) -> Self {
        DetRand { state }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    /// Advance and return the raw 53-bit output.
    pub fn next_bits(&mut self) -> u64 {
        self.state = self.state.wrapping_mul(MULTIPLIER).wrapping_add(INCREMENT);
        self.state >> 11
    }

    /// Next value in `[0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        self.next_bits() as f64 / UNIT
    }

    /// True with probability `p`.
    pub fn chance(&mut self, p: f64) -> bool {
        self.next_unit() < p
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as f64;
        lo + ((self.next_unit() * span) as u64).min(hi - lo)
    }

    /// Index drawn with probability proportional to `weights`.
    pub fn weighted_index(&mut self, weights: &[f64]) -> Option<usize> {
        let total: f64 = weights.iter().sum();
        if weights.is_empty() || total <= 0.0 {
            return None;
        }
        let mut x = self.next_unit() * total;
        for (i, w) in weights.iter().enumerate() {
            if x < *w {
                return Some(i);
            }
            x -= w;
        }
        weights.iter().rposition(|w| *w > 0.0)
    }
}

/// Parse a golden-vector file: one hexadecimal 53-bit output per line.
pub fn parse_golden(text: &str) -> Result<Vec<u64>, std::num::ParseIntError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| u64::from_str_radix(l, 16))
        .collect()
}

/// Render the first `n` outputs for `seed` in golden-vector format.
pub fn golden_vector(seed: u64, n: usize) -> String {
    let mut rng = DetRand::seed(seed);
    (0..n).map(|_| format!("{:014x}\n", rng.next_bits())).collect()
}
