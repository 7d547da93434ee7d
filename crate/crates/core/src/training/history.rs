//! Replay store of past generated samples shown to the discriminator.

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct HistoryBuffer<T> {
    k: usize,
    items: Vec<Tensor<T>>,
    rng: Rng,
}

impl<T: Scalar> HistoryBuffer<T> {
    /// Buffer holding `2k` samples; `k = 0` disables it.
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, items: Vec::with_capacity(2 * k), rng: Rng::seed_from_u64(seed) }
    }

    pub fn capacity(&self) -> usize {
        2 * self.k
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.k > 0 && self.items.len() == self.capacity()
    }

    /// Stores the first half of `batch`. Once the buffer was already full,
    /// the first half of the returned batch is drawn from the shuffled store.
    pub fn mix(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        if self.k == 0 {
            return Ok(batch.clone());
        }
        let n = batch.shape().first().copied().unwrap_or(0);
        if n % 2 != 0 {
            return Err(Error::Invalid(format!("history buffer needs an even batch, got {n}")));
        }
        if n / 2 != self.k {
            return Err(Error::shape("history_mix", "batch axis", 2 * self.k, n));
        }
        let was_full = self.is_full();
        let samples = batch.unstack();
        self.items.extend(samples[..self.k].iter().cloned());
        if !was_full {
            return Ok(batch.clone());
        }
        self.items.shuffle(&mut self.rng);
        let popped = self.items.split_off(self.items.len() - self.k);
        let mixed: Vec<Tensor<T>> = popped.into_iter().chain(samples[self.k..].iter().cloned()).collect();
        Tensor::stack(&mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng as _;

    fn batch(n: usize, tag: f64) -> Tensor<f64> {
        Tensor::from_fn(&[n, 2], |i| tag + (i / 2) as f64)
    }

    #[test]
    fn fills_then_mixes() {
        let mut buf = HistoryBuffer::new(4, 1);
        let b0 = batch(8, 0.0);
        assert_eq!(buf.mix(&b0).unwrap(), b0);
        assert_eq!(buf.len(), 4);
        let b1 = batch(8, 100.0);
        assert_eq!(buf.mix(&b1).unwrap(), b1);
        assert_eq!(buf.len(), 8);
        for round in 2..6 {
            let b = batch(8, 100.0 * round as f64);
            let out = buf.mix(&b).unwrap();
            assert_eq!(out.shape(), &[8, 2]);
            assert_eq!(buf.len(), 8);
            // Second half is always the current batch's second half.
            assert_eq!(&out.data()[8..], &b.data()[8..]);
            // First half comes from the store (old or just pushed samples).
            for s in out.unstack().iter().take(4) {
                assert!(s.data()[0] <= 100.0 * round as f64 + 3.0);
            }
        }
    }

    #[test]
    fn disabled_is_pass_through() {
        let mut buf = HistoryBuffer::<f64>::new(0, 1);
        let b = batch(5, 1.0);
        assert_eq!(buf.mix(&b).unwrap(), b);
        assert_eq!(buf.len(), 0);
    }

    #[test]
    fn rejects_odd_or_mismatched_batches() {
        let mut buf = HistoryBuffer::<f64>::new(4, 1);
        assert!(buf.mix(&batch(7, 0.0)).is_err());
        assert!(buf.mix(&batch(6, 0.0)).is_err());
    }

    #[test]
    fn occupancy_invariants_over_randomized_operations() {
        let mut rng = substream(9, "hb");
        let mut bufs: Vec<HistoryBuffer<f64>> = (1..=4).map(|k| HistoryBuffer::new(k, k as u64)).collect();
        let mut calls = vec![0usize; 4];
        for op in 0..10_000 {
            let i = rng.gen_range(0..4);
            let k = i + 1;
            let b = Tensor::from_fn(&[2 * k, 3], |_| rng.gen_range(-1.0..1.0));
            let before_full = bufs[i].is_full();
            let out = bufs[i].mix(&b).unwrap();
            calls[i] += 1;
            assert_eq!(out.shape(), b.shape(), "op {op}");
            assert!(bufs[i].len() <= 2 * k);
            assert_eq!(bufs[i].len(), (calls[i] * k).min(2 * k));
            if !before_full {
                assert_eq!(out, b);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let run = |seed| {
            let mut buf = HistoryBuffer::new(2, seed);
            (0..6).map(|r| buf.mix(&batch(4, 10.0 * r as f64)).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
    }
}
