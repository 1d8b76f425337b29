use serde::{Deserialize, Serialize};

use super::Triple;
use crate::error::{GathError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub rel: usize,
    pub tail: usize,
}

/// CSR grouping of edges by head entity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborhoodIndex {
    offsets: Vec<usize>,
    edges: Vec<Edge>,
}

impl NeighborhoodIndex {
    /// Stable counting sort of `triples` by head.
    pub fn build(triples: &[Triple], num_entities: usize, num_relations: usize) -> Result<Self> {
        let mut counts = vec![0usize; num_entities + 1];
        for t in triples {
            if t.head >= num_entities || t.tail >= num_entities {
                return Err(GathError::Data(format!(
                    "triple {t:?} references an entity outside 0..{num_entities}"
                )));
            }
            if t.rel >= num_relations {
                return Err(GathError::Data(format!(
                    "triple {t:?} references a relation outside 0..{num_relations}"
                )));
            }
            counts[t.head + 1] += 1;
        }
        for i in 0..num_entities {
            counts[i + 1] += counts[i];
        }
        let offsets = counts;
        let mut cursor = offsets.clone();
        let mut edges = vec![Edge { rel: 0, tail: 0 }; triples.len()];
        for t in triples {
            edges[cursor[t.head]] = Edge {
                rel: t.rel,
                tail: t.tail,
            };
            cursor[t.head] += 1;
        }
        Ok(Self { offsets, edges })
    }

    pub fn num_entities(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn neighbors(&self, head: usize) -> &[Edge] {
        &self.edges[self.offsets[head]..self.offsets[head + 1]]
    }

    /// Head entity of every edge, in edge order.
    pub fn heads(&self) -> Vec<usize> {
        let mut heads = Vec::with_capacity(self.edges.len());
        for i in 0..self.num_entities() {
            heads.extend(std::iter::repeat_n(i, self.offsets[i + 1] - self.offsets[i]));
        }
        heads
    }
}
