use super::Tensor;
use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for an independent sub-stream, e.g. `(seed, layer, role)`.
pub fn derive_seed(parent: u64, parts: &[u64]) -> u64 {
    let mut h = parent;
    let mut out = splitmix64(&mut h);
    for &p in parts {
        let mut s = out ^ p.wrapping_mul(GOLDEN).rotate_left(17);
        out = splitmix64(&mut s);
    }
    out
}

/// xoshiro256** generator seeded through splitmix64.
///
/// Uniform draws use the top 53 bits; normal draws use Box–Muller consuming
/// exactly two uniforms per sample (the second variate is discarded), with
/// the portable `libm` transcendental functions so streams replay bit-exactly
/// on every platform.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self { seed, s }
    }

    /// Generator for the sub-stream `derive_seed(seed, parts)`.
    pub fn derive(seed: u64, parts: &[u64]) -> Self {
        Self::new(derive_seed(seed, parts))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    pub fn from_state(seed: u64, s: [u64; 4]) -> Self {
        Self { seed, s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_scalar(&mut self, lo: f64, hi: f64) -> f64 {
        loop {
            let v = lo + (hi - lo) * self.next_f64();
            if v < hi {
                return v;
            }
        }
    }

    pub fn normal_scalar(&mut self, mean: f64, std: f64) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let z = libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2);
        mean + std * z
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(
                "rng_uniform",
                format!("need finite lo < hi, got [{lo}, {hi})"),
            ));
        }
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.uniform_scalar(lo, hi)).collect())
    }

    pub fn normal(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
        if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::invalid(
                "rng_normal",
                format!("need finite mean and std >= 0, got mean {mean}, std {std}"),
            ));
        }
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.normal_scalar(mean, std)).collect())
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
