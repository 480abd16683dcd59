//! Fixed-capacity experience store with uniform minibatch sampling.

use rand::Rng;
use std::collections::HashSet;

use super::transitions::Transition;

/// Asked for a batch before enough experience accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("replay buffer holds {have} transitions, batch needs {need}")]
pub struct NotReady {
    pub have: usize,
    pub need: usize,
}

/// Ring buffer: once full, new experience overwrites the oldest.
#[derive(Debug)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { items: Vec::new(), capacity, next: 0 }
    }

    pub fn push(&mut self, transition: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(transition);
        } else {
            self.items[self.next] = transition;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn extend<I: IntoIterator<Item = Transition>>(&mut self, transitions: I) {
        for t in transitions {
            self.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, index: usize) -> &Transition {
        &self.items[index]
    }

    /// Draws `batch` distinct transitions uniformly at random.
    pub fn sample<R: Rng>(
        &self,
        batch: usize,
        rng: &mut R,
    ) -> Result<Vec<&Transition>, NotReady> {
        let idx = self.sample_indices(batch, rng)?;
        Ok(idx.into_iter().map(|i| &self.items[i]).collect())
    }

    /// Floyd's algorithm: each k-subset of the occupied slots is equally
    /// likely, with exactly `batch` RNG draws.
    pub fn sample_indices<R: Rng>(
        &self,
        batch: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>, NotReady> {
        let n = self.items.len();
        if batch > n {
            return Err(NotReady { have: n, need: batch });
        }
        let mut chosen = HashSet::with_capacity(batch);
        let mut order = Vec::with_capacity(batch);
        for j in n - batch..n {
            let t = rng.random_range(0..=j);
            let pick = if chosen.insert(t) { t } else { j };
            if pick != t {
                chosen.insert(pick);
            }
            order.push(pick);
        }
        Ok(order)
    }
}
