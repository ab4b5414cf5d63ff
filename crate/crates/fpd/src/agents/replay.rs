//! Experience replay: a bounded FIFO of transitions with uniform sampling.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One environment step. States are stored compactly as `f32` feature
/// vectors; `next_state` is absent exactly at episode ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Box<[f32]>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Option<Box<[f32]>>,
    pub done: bool,
}

impl Transition {
    pub fn is_consistent(&self) -> bool {
        !self.done || self.next_state.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        ReplayBuffer {
            items: VecDeque::with_capacity(capacity.min(1 << 20)),
            capacity,
        }
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

    /// Appends a transition, evicting the oldest once full.
    pub fn push(&mut self, t: Transition) {
        debug_assert!(t.is_consistent());
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.items[idx]
    }

    /// Uniform independent draws over the current contents.
    pub fn sample<'a>(&'a self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<&'a Transition> {
        (0..batch)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect()
    }
}
