//! Deterministic random streams.
//!
//! Every random decision in the pipeline flows through [`SeededRng`], a thin
//! wrapper over ChaCha8 so streams are identical across runs and platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct SeededRng(ChaCha8Rng);

/// Builds the pipeline's deterministic generator for `seed`.
pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng(ChaCha8Rng::seed_from_u64(seed))
}

impl SeededRng {
    /// Derives an independent substream, e.g. one per window index, so work
    /// order does not affect the draws any unit sees.
    pub fn substream(seed: u64, stream: u64) -> SeededRng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        SeededRng(rng)
    }

    /// Uniform draw in [0, 1).
    pub fn draw_uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    /// Uniform integer in [0, n).
    pub fn draw_index(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    /// Standard normal via Box-Muller.
    pub fn draw_normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.draw_uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.draw_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
