use serde::{Deserialize, Serialize};

use super::SparsityGenotype;

/// Up to `capacity` distinct feasible genotypes, best fitness first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    capacity: usize,
    entries: Vec<SparsityGenotype>,
}

impl RankedList {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[SparsityGenotype] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Insert a feasible, not yet listed genotype if it makes the cut.
    /// Equal fitness keeps the earlier entry ahead.
    pub fn insert(&mut self, genotype: &SparsityGenotype) -> bool {
        if !genotype.feasible || self.capacity == 0 {
            return false;
        }
        if self.entries.iter().any(|e| e.sparsities == genotype.sparsities) {
            return false;
        }
        if self.entries.len() == self.capacity
            && self.entries.last().is_some_and(|w| genotype.fitness <= w.fitness)
        {
            return false;
        }
        let pos = self
            .entries
            .iter()
            .position(|e| genotype.fitness > e.fitness)
            .unwrap_or(self.entries.len());
        self.entries.insert(pos, genotype.clone());
        self.entries.truncate(self.capacity);
        true
    }
}
