//! Counter-based Gaussian increments.
//!
//! Path `k` of a [`NoiseSource`] is ChaCha8 stream `k` under the source seed, so
//! the increment for `(seed, path, step)` does not depend on which thread
//! simulates the path or in what order paths are visited.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::{c, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseSource {
    seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// Each Box-Muller pair consumes two u64 draws = four 32-bit words.
const WORDS_PER_PAIR: u128 = 4;

#[inline]
fn box_muller(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let th = std::f64::consts::TAU * u2;
    (r * th.cos(), r * th.sin())
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent source for a different purpose (tag), e.g. an oracle run
    /// that must not share noise with the estimator it is checked against.
    pub fn derive(&self, tag: u64) -> Self {
        Self { seed: splitmix64(self.seed ^ splitmix64(tag.wrapping_add(0x5EED))) }
    }

    fn stream(&self, path: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path as u64);
        rng
    }

    /// Fill `out` with standard normals for steps `0..out.len()` of `path`.
    pub fn fill_normals<T: Scalar>(&self, path: usize, out: &mut [T]) {
        let mut rng = self.stream(path);
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = box_muller(&mut rng);
            pair[0] = c(a);
            pair[1] = c(b);
        }
        if let [last] = chunks.into_remainder() {
            *last = c(box_muller(&mut rng).0);
        }
    }

    /// Brownian increments `N(0, dt)` for steps `0..out.len()` of `path`.
    pub fn fill_increments<T: Scalar>(&self, path: usize, dt: T, out: &mut [T]) {
        self.fill_normals(path, out);
        let sq = dt.sqrt();
        for v in out.iter_mut() {
            *v *= sq;
        }
    }

    /// Random access to a single standard normal.
    pub fn normal_at(&self, path: usize, step: usize) -> f64 {
        let mut rng = self.stream(path);
        rng.set_word_pos((step / 2) as u128 * WORDS_PER_PAIR);
        let (a, b) = box_muller(&mut rng);
        if step % 2 == 0 {
            a
        } else {
            b
        }
    }

    /// Uniform draws for sampling tasks (probe points, tournaments).
    pub fn uniform_stream(&self, stream: u64) -> UniformStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        UniformStream { rng }
    }
}

pub struct UniformStream {
    rng: ChaCha8Rng,
}

impl UniformStream {
    /// Uniform on `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.gen::<f64>()
    }

    pub fn index(&mut self, n: usize) -> usize {
        (self.rng.next_u64() % n as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        box_muller(&mut self.rng).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_access_matches_sequential() {
        let ns = NoiseSource::new(42);
        let mut seq = vec![0.0f64; 11];
        ns.fill_normals(7, &mut seq);
        for (i, v) in seq.iter().enumerate() {
            assert_eq!(*v, ns.normal_at(7, i));
        }
    }

    #[test]
    fn paths_differ_and_repeat() {
        let ns = NoiseSource::new(1);
        let mut a = vec![0.0f64; 4];
        let mut b = vec![0.0f64; 4];
        ns.fill_normals(0, &mut a);
        ns.fill_normals(1, &mut b);
        assert_ne!(a, b);
        ns.fill_normals(0, &mut b);
        assert_eq!(a, b);
        assert_ne!(ns.derive(1).seed(), ns.seed());
    }

    #[test]
    fn moments_look_standard() {
        let ns = NoiseSource::new(3);
        let mut v = vec![0.0f64; 200_000];
        ns.fill_normals(0, &mut v);
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        assert!(m.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.02);
    }
}
