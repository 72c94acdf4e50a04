use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{lit, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition<T> {
    pub state: Vec<T>,
    pub action: usize,
    pub reward: T,
    pub next_state: Vec<T>,
    pub done: bool,
    pub mask_next: Vec<bool>,
}

/// Binary sum tree over leaf weights.
#[derive(Clone, Debug)]
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        SumTree {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    fn set(&mut self, i: usize, value: f64) {
        let mut k = self.leaves + i;
        self.nodes[k] = value;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    /// Leaf whose cumulative range contains `mass`.
    fn find(&self, mut mass: f64, len: usize) -> usize {
        let mut k = 1;
        while k < self.leaves {
            let left = self.nodes[2 * k];
            if mass < left {
                k *= 2;
            } else {
                mass -= left;
                k = 2 * k + 1;
            }
        }
        (k - self.leaves).min(len - 1)
    }
}

/// A sampled minibatch: buffer slots and normalized importance weights.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
}

/// Proportional prioritized replay with stratified sampling.
#[derive(Clone, Debug)]
pub struct PrioritizedReplayBuffer<T> {
    capacity: usize,
    pub alpha: f64,
    pub beta: f64,
    data: Vec<Transition<T>>,
    next: usize,
    tree: SumTree,
    max_priority: f64,
}

impl<T: Scalar> PrioritizedReplayBuffer<T> {
    pub fn new(capacity: usize, alpha: f64, beta: f64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        PrioritizedReplayBuffer {
            capacity,
            alpha,
            beta,
            data: Vec::with_capacity(capacity),
            next: 0,
            tree: SumTree::new(capacity),
            max_priority: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition<T> {
        &self.data[i]
    }

    /// Stores a transition at the current maximum priority, overwriting the oldest when full.
    pub fn push(&mut self, t: Transition<T>) {
        let slot = self.next;
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[slot] = t;
        }
        self.tree.set(slot, self.max_priority.powf(self.alpha));
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.tree.get(i).powf(1.0 / self.alpha.max(f64::MIN_POSITIVE))
    }

    /// Sampling probability of slot `i`.
    pub fn probability(&self, i: usize) -> f64 {
        self.tree.get(i) / self.tree.total()
    }

    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Sample<T> {
        assert!(!self.data.is_empty(), "cannot sample an empty buffer");
        let total = self.tree.total();
        let segment = total / batch as f64;
        let n = self.data.len() as f64;
        let mut indices = Vec::with_capacity(batch);
        let mut raw = Vec::with_capacity(batch);
        for k in 0..batch {
            let mass = segment * (k as f64 + rng.random::<f64>());
            let i = self.tree.find(mass.min(total * (1.0 - f64::EPSILON)), self.data.len());
            let p = (self.tree.get(i) / total).max(f64::MIN_POSITIVE);
            indices.push(i);
            raw.push((n * p).powf(-self.beta));
        }
        let max = raw.iter().copied().fold(0.0, f64::max);
        let weights = raw.iter().map(|w| lit(w / max)).collect();
        Sample { indices, weights }
    }

    pub fn update_priority(&mut self, i: usize, priority: f64) {
        assert!(priority > 0.0 && priority.is_finite(), "priority must be positive");
        self.max_priority = self.max_priority.max(priority);
        self.tree.set(i, priority.powf(self.alpha));
    }
}
