//! Deterministic random streams.
//!
//! The generator is pinned so that training runs and synthetic datasets are
//! reproducible bit-for-bit on every platform:
//!
//! * State setup: the 64-bit seed is expanded by **SplitMix64**
//!   (`z = s += 0x9E3779B97F4A7C15; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
//!   z = (z ^ z>>27) * 0x94D049BB133111EB; z ^ z>>31`) into the four words of
//!   the main state. An all-zero state is replaced by the word `1 << 63`.
//! * Stream: **xoshiro256\*\*** — output `rotl(s1 * 5, 7) * 9`, then the
//!   xorshift update `t = s1 << 17; s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3;
//!   s2 ^= t; s3 = rotl(s3, 45)`.
//! * `u64 -> f64` uniform in `[0, 1)`: `(x >> 11) * 2^-53`.
//! * Normal samples: Box–Muller on two uniforms, with the first mapped into
//!   `(0, 1]` as `((x >> 11) + 1) * 2^-53` so the logarithm is finite. Both
//!   outputs of the transform are consumed in order.
//!
//! All tensor fills draw in `f64` and round once to the target precision, so
//! an `f32` stream is exactly the rounded `f64` stream.

use crate::error::{parameter, Result};
use crate::tensor::{Scalar, Tensor};

/// Sampling distributions accepted by [`RandomStream::fill`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    /// Uniform on `[a, b)`.
    Uniform { a: f64, b: f64 },
    /// Gaussian with mean `mu` and standard deviation `sigma >= 0`.
    Normal { mu: f64, sigma: f64 },
}

/// Seeded xoshiro256** stream; see the module docs for the exact algorithm.
#[derive(Debug, Clone)]
pub struct RandomStream {
    state: [u64; 4],
    /// Spare Box–Muller output awaiting consumption.
    cached_normal: Option<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut state = [0u64; 4];
        for word in &mut state {
            *word = splitmix64(&mut sm);
        }
        if state == [0; 4] {
            state[0] = 1 << 63;
        }
        Self {
            state,
            cached_normal: None,
        }
    }

    /// Independent stream derived from this stream's seed material and a
    /// label; used to give deterministic per-sample streams to parallel work.
    pub fn derive(&self, label: u64) -> Self {
        let mut sm = self.state[0] ^ label.wrapping_mul(0xA076_1D64_78BD_642F);
        let mut state = [0u64; 4];
        for word in &mut state {
            *word = splitmix64(&mut sm);
        }
        if state == [0; 4] {
            state[0] = 1 << 63;
        }
        Self {
            state,
            cached_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[a, b)`.
    pub fn uniform(&mut self, a: f64, b: f64) -> f64 {
        a + (b - a) * self.next_f64()
    }

    /// Unbiased integer in `[0, bound)` via 128-bit multiply-shift.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "below() needs a positive bound");
        (((self.next_u64() as u128) * (bound as u128)) >> 64) as usize
    }

    /// Integer in `[lo, hi]` inclusive.
    pub fn int_in(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(lo <= hi);
        lo + self.below((hi - lo + 1) as usize) as i64
    }

    pub fn flip(&mut self) -> bool {
        self.next_u64() & 1 == 1
    }

    /// Standard normal via Box–Muller; consumes two uniforms per pair and
    /// caches the second output.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fills a fresh tensor from the stream; the stream state advances by the
    /// number of draws.
    pub fn fill<T: Scalar>(&mut self, shape: &[usize], dist: Distribution) -> Result<Tensor<T>> {
        if shape.is_empty() {
            return parameter("rng fill needs a non-empty shape");
        }
        match dist {
            Distribution::Uniform { a, b } => {
                if !(a.is_finite() && b.is_finite()) || a > b {
                    return parameter(format!("invalid uniform bounds [{a}, {b})"));
                }
            }
            Distribution::Normal { mu, sigma } => {
                if !(mu.is_finite() && sigma.is_finite()) || sigma < 0.0 {
                    return parameter(format!("invalid normal parameters ({mu}, {sigma})"));
                }
            }
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let x = match dist {
                Distribution::Uniform { a, b } => self.uniform(a, b),
                Distribution::Normal { mu, sigma } => mu + sigma * self.next_normal(),
            };
            data.push(T::from_f64(x));
        }
        Tensor::new(shape, data)
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
