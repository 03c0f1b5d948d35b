//! Counter-based splittable pseudo-random numbers.
//!
//! Training must be bit-reproducible for a fixed seed no matter how the batch
//! work is scheduled, so every parallel unit of work derives its own stream
//! from a (parent state, tag) pair instead of sharing a mutable generator.
//! The core is the SplitMix64 finalizer over a Weyl sequence; streams are
//! derived by hashing the tag into the state without advancing the parent.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const TAG_MUL: u64 = 0xA24B_AED4_963E_E407;
const TAG_ADD: u64 = 0x9FB2_1C65_1E98_DF25;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator with O(1) stream derivation.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    cached_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: mix64(seed.wrapping_add(GOLDEN)),
            cached_normal: None,
        }
    }

    /// Derives an independent child stream from the current state and `tag`
    /// without advancing this generator. Distinct tags give distinct streams;
    /// the caller owns tag uniqueness.
    pub fn stream(&self, tag: u64) -> Rng {
        let salted = tag.wrapping_mul(TAG_MUL).wrapping_add(TAG_ADD);
        Rng {
            state: mix64(self.state ^ mix64(salted)),
            cached_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform draw from [0, 1) with 53 bits of mantissa.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / 9_007_199_254_740_992.0; // 2^-53
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform draw from the half-open interval [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased uniform integer in [0, n). Panics if n == 0.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is undefined");
        let bound = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < bound {
                return x % n;
            }
        }
    }

    /// Standard normal via Box-Muller; the second value of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        const SCALE: f64 = 1.0 / 9_007_199_254_740_992.0;
        // u1 in (0, 1] keeps the log finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * SCALE;
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    /// Poisson draw by CDF inversion; exact and loop-bounded for the small
    /// means used here.
    pub fn poisson(&mut self, lambda: f64) -> u64 {
        assert!(lambda > 0.0 && lambda < 700.0, "poisson mean out of range");
        let u = self.uniform();
        let mut p = (-lambda).exp();
        let mut cdf = p;
        let mut k: u64 = 0;
        while u > cdf {
            k += 1;
            p *= lambda / k as f64;
            cdf += p;
            if k > 10_000 {
                break; // u ~ 1.0 and fp saturation; tail is astronomically unlikely
            }
        }
        k
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, data: &mut [T]) {
        for i in (1..data.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            data.swap(i, j);
        }
    }
}
