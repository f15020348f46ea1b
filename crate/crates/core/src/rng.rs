//! Seeded, platform-independent random streams.
//!
//! Each stream is a ChaCha8 generator keyed by `seed` with the ChaCha stream
//! counter set to `stream_id`, so `(seed, stream_id)` pairs produce disjoint,
//! reproducible sequences.
//!
//! Variate transforms:
//! - uniform on the open interval (0, 1): top 53 bits of a `u64`, offset by half an ulp step;
//! - standard normal: Box–Muller, both variates of each pair are used;
//! - standard Laplace (scale 1): inverse CDF `-sign(u - 1/2) ln(1 - 2|u - 1/2|)`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream families. The high 32 bits of a stream id name the purpose; the low
/// 32 bits index the sample, keeping streams disjoint across purposes.
pub mod purpose {
    pub const PRIOR: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const DROPOUT: u64 = 6;
    pub const OBSERVATION: u64 = 7;
    pub const ORACLE: u64 = 8;
    pub const TEST: u64 = 9;
}

pub fn stream_id(purpose: u64, index: u64) -> u64 {
    (purpose << 32) | (index & 0xFFFF_FFFF)
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            spare_normal: None,
        }
    }

    pub fn for_purpose(seed: u64, purpose: u64, index: u64) -> Self {
        Self::new(seed, stream_id(purpose, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform variate on (0, 1); never returns 0 or 1.
    pub fn uniform(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Standard Laplace variate (location 0, scale 1, variance 2).
    pub fn laplace(&mut self) -> f64 {
        let c = self.uniform() - 0.5;
        -c.signum() * (1.0 - 2.0 * c.abs()).ln()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire-style rejection keeps the draw unbiased.
        let n64 = n as u64;
        let zone = u64::MAX - (u64::MAX - n64 + 1) % n64;
        loop {
            let v = self.inner.next_u64();
            if v <= zone {
                return (v % n64) as usize;
            }
        }
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}
