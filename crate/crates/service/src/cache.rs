use std::collections::VecDeque;
use std::sync::Arc;

use chronofield::Field32;

/// Least-recently-used set of deserialized time steps.
pub struct FieldCache {
    capacity: usize,
    /// Most recent at the back.
    entries: VecDeque<(u32, Arc<Field32>)>,
    hits: u64,
    misses: u64,
}

impl FieldCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
            hits: 0,
            misses: 0,
        }
    }

    pub fn get(&mut self, t: u32) -> Option<Arc<Field32>> {
        match self.entries.iter().position(|(k, _)| *k == t) {
            Some(i) => {
                let entry = self.entries.remove(i).expect("index in range");
                let field = entry.1.clone();
                self.entries.push_back(entry);
                self.hits += 1;
                Some(field)
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    pub fn insert(&mut self, t: u32, field: Arc<Field32>) {
        self.entries.retain(|(k, _)| *k != t);
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((t, field));
    }

    pub fn keys(&self) -> Vec<u32> {
        self.entries.iter().map(|(k, _)| *k).collect()
    }

    /// `(hits, misses)`
    pub fn stats(&self) -> (u64, u64) {
        (self.hits, self.misses)
    }
}
