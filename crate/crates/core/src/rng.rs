//! Counter-based seeded random streams.
//!
//! Every consumer forks its own stream from a root seed plus a tag path
//! (e.g. `[epoch, batch, example]`), so results do not depend on the order
//! in which independent pieces of work are scheduled. The generator is
//! SplitMix64: tiny, platform-independent, and good enough for noise.

use crate::tensor::Real;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        // One warmup mix so nearby seeds decorrelate.
        let mut state = seed;
        let _ = splitmix(&mut state);
        Rng { state }
    }

    /// Derive an independent stream identified by a tag path.
    /// Forking never advances `self`.
    pub fn fork(&self, tags: &[u64]) -> Rng {
        let mut state = self.state;
        for &t in tags {
            state ^= t.wrapping_mul(GOLDEN).rotate_left(17);
            let _ = splitmix(&mut state);
        }
        Rng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix(&mut self.state)
    }

    /// Uniform in [0, 1).
    pub fn next_real(&mut self) -> Real {
        (self.next_u64() >> 11) as Real * (1.0 / (1u64 << 53) as Real)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: Real, hi: Real) -> Real {
        lo + (hi - lo) * self.next_real()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Seeded Fisher-Yates permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}
