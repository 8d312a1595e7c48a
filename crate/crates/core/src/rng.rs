use serde::{Deserialize, Serialize};

/// Deterministic counter-based random stream.
///
/// The state is a seed plus a stream position; draw `n` is a pure function of
/// `(seed, n)`, so identical seeds and call sequences reproduce identical
/// values on every platform. Substreams derived with [`RngState::substream`]
/// are statistically independent of the parent and of each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    seed: u64,
    pos: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, pos: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pos(&self) -> u64 {
        self.pos
    }

    /// Derives an independent stream keyed by `label`. The parent is unchanged.
    pub fn substream(&self, label: u64) -> RngState {
        RngState {
            seed: mix(self.seed ^ mix(label.wrapping_add(GOLDEN))),
            pos: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.pos = self.pos.wrapping_add(1);
        mix(self.seed.wrapping_add(self.pos.wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). n must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw via Box-Muller. Consumes two uniforms per call.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
