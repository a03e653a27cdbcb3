use std::collections::VecDeque;

use rand::Rng;

use crate::env::{ActionBlock, EnvState};

/// One stored step together with the data the constraint residuals need.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub x_prev: EnvState,
    pub block: ActionBlock,
    /// Reward used for critic regression (scaled, possibly penalized).
    pub r: f64,
    pub x_next: EnvState,
    /// The power flow failed; no bootstrapping past this step.
    pub terminal: bool,
    /// Demand rows `t .. t + T` seen by the block.
    pub horizon_d_p: Vec<Vec<f64>>,
    pub horizon_d_q: Vec<Vec<f64>>,
}

/// FIFO ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn sample<'a>(&'a self, n: usize, rng: &mut impl Rng) -> Vec<&'a Transition> {
        self.sample_indices(n, rng).into_iter().map(|i| &self.items[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(r: f64) -> Transition {
        let s = EnvState { v_history: vec![], soc: vec![], t: 0 };
        Transition {
            x_prev: s.clone(),
            block: ActionBlock::new(0, 0, vec![]),
            r,
            x_next: s,
            terminal: false,
            horizon_d_p: vec![],
            horizon_d_q: vec![],
        }
    }

    #[test]
    fn eviction_is_fifo() {
        let mut b = ReplayBuffer::new(3);
        for k in 0..5 {
            b.push(tr(k as f64));
        }
        assert_eq!(b.len(), 3);
        let rs: Vec<f64> = (0..3).map(|i| b.get(i).unwrap().r).collect();
        assert_eq!(rs, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_is_reproducible_and_covers_buffer() {
        let mut b = ReplayBuffer::new(10);
        for k in 0..10 {
            b.push(tr(k as f64));
        }
        let a = b.sample_indices(1000, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b.sample_indices(1000, &mut ChaCha8Rng::seed_from_u64(1)));
        let mut counts = [0usize; 10];
        a.iter().for_each(|&i| counts[i] += 1);
        assert!(counts.iter().all(|&c| c > 60 && c < 140), "{counts:?}");
    }
}
