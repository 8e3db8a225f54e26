//! Ring-buffer experience replay with optional proportional prioritization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::Observation;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Observation,
    /// Action index: 0, 1, 2 for short, flat, long.
    pub action: usize,
    pub reward: f64,
    pub next_state: Observation,
    pub done: bool,
}

impl Transition {
    pub fn validate(&self, n_actions: usize) -> Result<()> {
        if self.action >= n_actions {
            return Err(Error::Range(format!("action index {} out of range", self.action)));
        }
        if !self.reward.is_finite() || self.state.iter().chain(self.next_state.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite transition".into()));
        }
        Ok(())
    }
}

/// Binary sum tree over a power-of-two number of leaves.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        SumTree { leaves, nodes: vec![0.0; 2 * leaves] }
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.leaves + leaf]
    }

    /// Set a leaf and recompute its ancestors from their children.
    pub fn set(&mut self, leaf: usize, value: f64) {
        let mut i = self.leaves + leaf;
        self.nodes[i] = value;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    /// Leaf whose cumulative-mass interval contains `mass`.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut i = 1;
        while i < self.leaves {
            let left = self.nodes[2 * i];
            if mass < left {
                i *= 2;
            } else {
                mass -= left;
                i = 2 * i + 1;
            }
        }
        i - self.leaves
    }

    /// Largest deviation between an internal node and the sum of its children.
    pub fn max_inconsistency(&self) -> f64 {
        (1..self.leaves)
            .map(|i| (self.nodes[i] - self.nodes[2 * i] - self.nodes[2 * i + 1]).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
    prioritized: bool,
    alpha: f64,
    max_priority: f64,
    tree: SumTree,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, prioritized: bool, alpha: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer_size must be positive".into()));
        }
        if !(alpha >= 0.0) {
            return Err(Error::Config("priority alpha must be non-negative".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
            prioritized,
            alpha,
            max_priority: 1.0,
            tree: SumTree::new(capacity),
        })
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

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn get(&self, index: usize) -> &Transition {
        &self.items[index]
    }

    /// Store at the cursor with the largest priority seen so far.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.tree.set(self.cursor, self.max_priority.powf(self.alpha));
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// `None` while fewer than `batch_size` transitions are stored.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, beta: f64, rng: &mut R) -> Option<Batch> {
        let n = self.items.len();
        if batch_size == 0 || n < batch_size {
            return None;
        }
        if !self.prioritized {
            let indices = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
            return Some(Batch { indices, weights: vec![1.0; batch_size] });
        }
        let total = self.tree.total();
        let segment = total / batch_size as f64;
        let mut indices = Vec::with_capacity(batch_size);
        for k in 0..batch_size {
            let u: f64 = rng.random();
            let mass = (k as f64 + u) * segment;
            // Rounding can push the descent into an empty leaf past the stored range.
            let mut idx = self.tree.find(mass.min(total * (1.0 - 1e-12)));
            if idx >= n || self.tree.get(idx) == 0.0 {
                idx = self.tree.find(segment * k as f64).min(n - 1);
            }
            indices.push(idx);
        }
        let raw: Vec<f64> = indices
            .iter()
            .map(|&i| (n as f64 * self.tree.get(i) / total).powf(-beta))
            .collect();
        let max_w = raw.iter().cloned().fold(0.0, f64::max);
        let weights = raw.iter().map(|w| w / max_w).collect();
        Some(Batch { indices, weights })
    }

    /// Record new raw priorities (before exponentiation) for sampled slots.
    pub fn update_priorities(&mut self, indices: &[usize], priorities: &[f64]) {
        if !self.prioritized {
            return;
        }
        for (&i, &p) in indices.iter().zip(priorities) {
            self.tree.set(i, p.powf(self.alpha));
            self.max_priority = self.max_priority.max(p);
        }
    }
}
