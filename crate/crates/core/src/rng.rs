//! Counter-based Gaussian increments.
//!
//! Every normal variate is addressed by `(particle, step, mode)`: the
//! particle selects a ChaCha stream and the step a word offset inside that
//! stream, so increments can be regenerated in any order and on any thread.

use std::f64::consts::PI;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// 32-bit words consumed by one normal variate (two `u64` draws).
const WORDS_PER_NORMAL: u128 = 4;

/// Seed and truncation level of the cylindrical Wiener process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub seed: u64,
    /// Number of driven modes `K`.
    pub modes: usize,
}

impl NoisePlan {
    pub fn new(seed: u64, modes: usize) -> Self {
        NoisePlan { seed, modes }
    }

    pub fn stream(&self, particle: usize) -> NoiseStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(particle as u64);
        NoiseStream {
            rng,
            modes: self.modes,
        }
    }

    /// `ΔW_k` for one `(particle, step)`, written into `out[..K]`.
    pub fn increments(&self, particle: usize, step: usize, dt: f64, out: &mut [f64]) {
        self.stream(particle).increments(step, dt, out);
    }
}

/// Per-particle view of a [`NoisePlan`].
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    modes: usize,
}

impl NoiseStream {
    pub fn increments(&mut self, step: usize, dt: f64, out: &mut [f64]) {
        self.rng
            .set_word_pos(step as u128 * WORDS_PER_NORMAL * self.modes as u128);
        let sd = dt.sqrt();
        for o in out.iter_mut().take(self.modes) {
            *o = sd * standard_normal(&mut self.rng);
        }
    }
}

/// Box–Muller, cosine branch only, so each variate uses a fixed number of words.
pub fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Uniform variate in `[0, 1)`.
pub fn uniform<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Independent generator for auxiliary sampling (initial laws, probes,
/// bootstrap), keyed by a purpose-specific stream id.
pub fn aux_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increments_are_addressable() {
        let plan = NoisePlan::new(42, 3);
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        plan.increments(5, 17, 0.01, &mut a);
        let mut s = plan.stream(5);
        for step in 0..20 {
            s.increments(step, 0.01, &mut b);
            if step == 17 {
                assert_eq!(a, b);
            }
        }
        let mut c = [0.0; 3];
        plan.increments(6, 17, 0.01, &mut c);
        assert_ne!(a, c);
    }

    #[test]
    fn increments_have_unit_variance_per_dt() {
        let plan = NoisePlan::new(1, 4);
        let dt = 0.25;
        let mut buf = [0.0; 4];
        let (mut s1, mut s2, mut n) = (0.0, 0.0, 0.0);
        for p in 0..50 {
            let mut st = plan.stream(p);
            for step in 0..200 {
                st.increments(step, dt, &mut buf);
                for x in buf {
                    s1 += x;
                    s2 += x * x;
                    n += 1.0;
                }
            }
        }
        let mean = s1 / n;
        let var = s2 / n - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var / dt - 1.0).abs() < 0.05, "var {var}");
    }
}
