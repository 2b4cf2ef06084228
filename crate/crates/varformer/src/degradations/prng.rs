//! Counter-based random generator: every draw is a pure hash of
//! (seed, lane, slot), so outputs are independent of evaluation order and
//! identical on every platform. Gaussians use the Irwin–Hall sum, which
//! needs only additions — no transcendental calls anywhere.

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stateless generator keyed by a seed; draws are addressed, not sequential.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng {
            key: mix(seed.wrapping_add(0x9E3779B97F4A7C15)),
        }
    }

    /// Raw 64 bits for address `(lane, slot)`.
    pub fn bits(&self, lane: u64, slot: u64) -> u64 {
        let a = self
            .key
            .wrapping_add(lane.wrapping_mul(0xD1B54A32D192ED03));
        let b = mix(a).wrapping_add(slot.wrapping_mul(0x8CB92BA72F3D8DD7));
        mix(b)
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn uniform(&self, lane: u64, slot: u64) -> f64 {
        (self.bits(lane, slot) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range(&self, lane: u64, slot: u64, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform(lane, slot)
    }

    /// Standard normal via Irwin–Hall: Σ of 12 uniforms − 6.
    /// Mean 0 and variance exactly 1; support limited to ±6.
    pub fn gauss(&self, lane: u64, slot: u64) -> f64 {
        let base = slot.wrapping_mul(12);
        let mut s = 0.0;
        for i in 0..12 {
            s += self.uniform(lane, base.wrapping_add(i));
        }
        s - 6.0
    }

    /// Uniform integer in [0, n).
    pub fn below(&self, lane: u64, slot: u64, n: u64) -> u64 {
        debug_assert!(n > 0);
        // 53-bit multiply-shift; bias is negligible for the small n used here
        (self.uniform(lane, slot) * n as f64) as u64
    }
}
