//! Counter-based deterministic random number generation.
//!
//! Each generator is a pure function of `(seed, counter)`, so independent
//! streams can be split off a parent seed by label without any shared
//! mutable state. Data, initialization, batch sampling, reparameterization,
//! and classifier streams all derive from one master seed this way.

use crate::numerics::tensor::Tensor2D;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic counter-based generator.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            counter: 0,
            spare_normal: None,
        }
    }

    /// Splits off an independent stream identified by `label`.
    ///
    /// The derived seed depends only on `(seed, label)`, never on how many
    /// values the parent has already produced.
    pub fn derive(&self, label: u64) -> Rng {
        Rng::new(mix(self.seed ^ mix(label.wrapping_mul(GOLDEN).wrapping_add(GOLDEN))))
    }

    /// The stream's seed (not its position); stable across draws.
    pub fn seed_value(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; the paired draw is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // Offset keeps u1 in (0, 1) so ln(u1) is finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_tensor(&mut self, rows: usize, cols: usize) -> Tensor2D {
        let mut t = Tensor2D::zeros(rows, cols);
        for v in t.data_mut() {
            *v = self.normal();
        }
        t
    }

    /// Draws `k` distinct indices from `0..n` by partial Fisher-Yates.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} distinct values from {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn derived_streams_do_not_depend_on_parent_position() {
        let parent = Rng::new(7);
        let early = parent.derive(3);
        let mut advanced = Rng::new(7);
        for _ in 0..50 {
            advanced.next_u64();
        }
        let late = advanced.derive(3);
        assert_eq!(early.seed, late.seed);
    }

    #[test]
    fn distinct_labels_give_distinct_streams() {
        let parent = Rng::new(7);
        let mut a = parent.derive(1);
        let mut b = parent.derive(2);
        let differs = (0..16).any(|_| a.next_u64() != b.next_u64());
        assert!(differs);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = Rng::new(123);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn choose_distinct_is_distinct_and_in_range() {
        let mut rng = Rng::new(9);
        let picks = rng.choose_distinct(10, 4);
        assert_eq!(picks.len(), 4);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
        assert!(picks.iter().all(|&p| p < 10));
    }
}
