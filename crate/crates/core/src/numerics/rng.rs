use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Seeded generator backed by ChaCha8 (`rand_chacha`), whose stream is
/// specified independently of platform and word size.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; `stream` distinguishes siblings.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self, std: f64) -> f64 {
        if std == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, std)
            .expect("finite non-negative std")
            .sample(&mut self.inner)
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal(std)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct items drawn without replacement, in draw order.
    pub fn choose_distinct<T: Clone>(&mut self, items: &[T], k: usize) -> Vec<T> {
        let mut pool = items.to_vec();
        let (picked, _) = pool.partial_shuffle(&mut self.inner, k);
        picked.to_vec()
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
            assert_eq!(a.normal(1.0).to_bits(), b.normal(1.0).to_bits());
        }
        assert_ne!(Rng::new(1).uniform(), Rng::new(2).uniform());
    }

    #[test]
    fn choose_distinct_has_no_duplicates() {
        let mut rng = Rng::new(7);
        let items: Vec<usize> = (0..20).collect();
        let mut picked = rng.choose_distinct(&items, 20);
        picked.sort();
        assert_eq!(picked, items);
    }
}
