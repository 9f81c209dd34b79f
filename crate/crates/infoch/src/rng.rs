//! Counter-based deterministic random number generation.
//!
//! Every draw is a pure function of `(seed, stream, counter)`, so independent
//! components (clients, noise channels, attack trials) can own disjoint
//! streams and replay them without shared state. Standard normals come from
//! Box-Muller over pairs of counter-indexed uniforms, which keeps random
//! access cheap: sample `i` of a noise matrix never depends on sample `i-1`.
//!
//! Not cryptographically secure; simulation use only.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_SALT: u64 = 0x6A09_E667_F3BC_C909;

/// SplitMix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed for a named sub-component.
///
/// `tag` separates purposes (data generation, noise, shuffling, ...) and
/// `index` separates instances (client id, round, ...).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_mul(GOLDEN) ^ index.wrapping_add(STREAM_SALT)))
}

/// Stateless counter-based generator for one `(seed, stream)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let key = mix64(seed ^ mix64(stream.wrapping_mul(GOLDEN).wrapping_add(STREAM_SALT)));
        CounterRng { key }
    }

    /// The `counter`-th 64-bit word of this stream.
    #[inline]
    pub fn u64_at(&self, counter: u64) -> u64 {
        mix64(self.key.wrapping_add(counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in the half-open interval (0, 1].
    ///
    /// The lower end is excluded so the value is always a valid Box-Muller
    /// radius argument (`ln` never sees zero).
    #[inline]
    pub fn uniform_at(&self, counter: u64) -> f64 {
        (((self.u64_at(counter) >> 11) + 1) as f64) * (1.0 / (1u64 << 53) as f64)
    }

    /// The `index`-th standard normal of this stream.
    ///
    /// Normals are produced in Box-Muller pairs; index `2p` and `2p+1` share
    /// the uniforms at counters `2p` and `2p+1`.
    pub fn normal_at(&self, index: u64) -> f64 {
        let pair = index >> 1;
        let u1 = self.uniform_at(pair << 1);
        let u2 = self.uniform_at((pair << 1) | 1);
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        if index & 1 == 0 {
            radius * angle.cos()
        } else {
            radius * angle.sin()
        }
    }
}

/// Sequential view over a counter stream, for call sites that just want
/// "the next draw" (shuffles, initialization, target picking).
#[derive(Clone, Copy, Debug)]
pub struct StreamRng {
    rng: CounterRng,
    next: u64,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        StreamRng {
            rng: CounterRng::new(seed, stream),
            next: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let w = self.rng.u64_at(self.next);
        self.next += 1;
        w
    }

    /// Uniform integer in `[0, bound)`. Modulo bias is negligible for the
    /// desk-scale ranges used here.
    pub fn next_range(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        (self.next_u64() % bound as u64) as usize
    }

    /// Standard normal; consumes two counters per draw.
    pub fn next_normal(&mut self) -> f64 {
        let n = self.rng.normal_at(self.next << 1);
        self.next += 1;
        n
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_range(i + 1);
            items.swap(i, j);
        }
    }
}
