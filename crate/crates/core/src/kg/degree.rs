use serde::{Deserialize, Serialize};

use super::KnowledgeGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bucket {
    Sparse,
    Moderate,
    Dense,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Sparse, Bucket::Moderate, Bucket::Dense];

    pub const NODE_SPARSE_MAX: usize = 100;
    pub const NODE_MODERATE_MAX: usize = 1000;
    pub const RELATION_SPARSE_MAX: usize = 200;
    pub const RELATION_MODERATE_MAX: usize = 500;

    pub fn for_node(degree: usize) -> Self {
        Self::classify(degree, Self::NODE_SPARSE_MAX, Self::NODE_MODERATE_MAX)
    }

    pub fn for_relation(degree: usize) -> Self {
        Self::classify(degree, Self::RELATION_SPARSE_MAX, Self::RELATION_MODERATE_MAX)
    }

    fn classify(degree: usize, sparse_max: usize, moderate_max: usize) -> Self {
        if degree <= sparse_max {
            Bucket::Sparse
        } else if degree <= moderate_max {
            Bucket::Moderate
        } else {
            Bucket::Dense
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Sparse => "sparse",
            Bucket::Moderate => "moderate",
            Bucket::Dense => "dense",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DegreeBuckets {
    pub node_degree: Vec<usize>,
    pub relation_degree: Vec<usize>,
    pub node_bucket: Vec<Bucket>,
    /// Indexed by raw relation id.
    pub relation_bucket: Vec<Bucket>,
}

impl DegreeBuckets {
    /// Bucket of any relation id, mapping reverse ids to their raw relation.
    pub fn relation(&self, rel: usize) -> Bucket {
        self.relation_bucket[rel % self.relation_bucket.len()]
    }
}

/// Degrees over the raw train split. A node's degree is the number of train
/// triples containing it, so a self-loop counts once.
pub fn bucket_degrees(kg: &KnowledgeGraph) -> DegreeBuckets {
    let mut node_degree = vec![0usize; kg.num_entities()];
    let mut relation_degree = vec![0usize; kg.vocab.num_raw_relations()];
    for t in &kg.train {
        node_degree[t.head] += 1;
        if t.tail != t.head {
            node_degree[t.tail] += 1;
        }
        relation_degree[t.rel] += 1;
    }
    DegreeBuckets {
        node_bucket: node_degree.iter().map(|&d| Bucket::for_node(d)).collect(),
        relation_bucket: relation_degree.iter().map(|&d| Bucket::for_relation(d)).collect(),
        node_degree,
        relation_degree,
    }
}
