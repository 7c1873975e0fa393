//! Counter-based SplitMix64 stream and Box-Muller Gaussian sampling.
//!
//! Transcendentals go through `libm` so the same seed yields the same bits on
//! every platform.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`; `bound` must be positive.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "bound must be positive");
        // Lemire's multiply-shift; bias is below 2^-32 for our extents.
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Fills `out` with standard-normal values, two per Box-Muller draw.
    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_mut(2);
        for pair in &mut chunks {
            // u1 in (0, 1] keeps the logarithm finite.
            let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
            let u2 = self.next_f64();
            let r = libm::sqrt(-2.0 * libm::log(u1));
            let theta = 2.0 * std::f64::consts::PI * u2;
            pair[0] = r * libm::cos(theta);
            if pair.len() > 1 {
                pair[1] = r * libm::sin(theta);
            }
        }
    }
}

/// SplitMix64 output finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed for a numbered sub-stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// Standard-normal tensor drawn from the SplitMix64 stream seeded with `seed`.
pub fn sample_noise<T: Scalar>(seed: u64, shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let mut buf = vec![0.0f64; numel];
    SplitMix64::new(seed).fill_gaussian(&mut buf);
    // Round through f32 so every scalar type sees the same draws.
    Tensor::new(shape, buf.into_iter().map(|v| T::from_f32_lossy(v as f32)).collect())
}
