//! Deterministic seeded PRNG and weight initialization.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood 2014): a 64-bit counter
//! advanced by the golden-ratio increment, finalized with two xor-multiply
//! mixing rounds. It is tiny, passes BigCrush, and — unlike platform default
//! generators — is fully specified here, so the same seed yields the same
//! stream on every platform. Normal deviates come from the Box-Muller
//! transform over `libm` (see [`crate::math`]), keeping them bit-stable too.

use crate::math;
use crate::tensor::Tensor;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 stream. Identical seed ⇒ identical stream, on all platforms.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    seed: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed, seed }
    }

    /// The seed this stream was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent named substream. Children with distinct labels
    /// are decorrelated from each other and from the parent, and depend only
    /// on `(parent seed, label)`, never on how much of the parent stream has
    /// been consumed.
    pub fn derive(&self, label: u64) -> Rng {
        let mixed = mix64(self.seed ^ label.wrapping_mul(GOLDEN_GAMMA).rotate_left(17));
        Rng::new(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`; safe as a log argument.
    pub fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. Plain modulo; the bias is below 2^-40
    /// for every `n` used in this project (catalog sizes ≪ 2^24).
    pub fn next_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal deviate via Box-Muller (cosine branch).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_usize(i + 1);
            xs.swap(i, j);
        }
    }
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Xavier (Glorot) normal initialization: zero-mean normal with variance
/// `2 / (fan_in + fan_out)`. For a `rows × cols` weight laid out as
/// `d_out × d_in`, fan_out is `rows` and fan_in is `cols`.
pub fn xavier_normal(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    assert!(rows > 0 && cols > 0, "xavier init requires positive extents");
    let std = math::sqrt(2.0 / (rows + cols) as f64);
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.next_normal() * std;
    }
    t
}
