//! Seeded generator for small structured graphs used in tests and demos.
//!
//! Entities are split into groups; relation `r` links a head in group `g` to
//! a tail in group `(g + shift_r) mod groups`, so held-out triples are
//! predictable from the training ones. Within the target group, tails are
//! drawn with Zipf-like popularity `1/(k+1)^skew` over a per-relation
//! ordering of the members; `skew = 0` is uniform.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{KnowledgeGraph, Triple};
use crate::error::{GathError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub groups: usize,
    pub skew: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 50 entities, 5 relations, 300 triples, 80/10/10, five groups.
    pub fn toy() -> Self {
        Self {
            entities: 50,
            relations: 5,
            triples: 300,
            groups: 5,
            skew: 1.5,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            seed: 17,
        }
    }

    pub fn tiny(entities: usize, relations: usize, triples: usize, seed: u64) -> Self {
        Self {
            entities,
            relations,
            triples,
            groups: 2.min(entities),
            skew: 0.0,
            valid_fraction: 0.0,
            test_fraction: 0.0,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NamedSplits {
    pub train: Vec<(String, String, String)>,
    pub valid: Vec<(String, String, String)>,
    pub test: Vec<(String, String, String)>,
}

impl NamedSplits {
    pub fn into_graph(self) -> Result<KnowledgeGraph> {
        KnowledgeGraph::from_named(&self.train, &self.valid, &self.test)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GathError::io(dir, e))?;
        for (name, rows) in [
            ("train.txt", &self.train),
            ("valid.txt", &self.valid),
            ("test.txt", &self.test),
        ] {
            let path = dir.join(name);
            let mut f = fs::File::create(&path).map_err(|e| GathError::io(&path, e))?;
            for (h, r, t) in rows {
                writeln!(f, "{h}\t{r}\t{t}").map_err(|e| GathError::io(&path, e))?;
            }
        }
        Ok(())
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<NamedSplits> {
    if spec.entities < 2 || spec.relations == 0 || spec.groups == 0 || spec.groups > spec.entities {
        return Err(GathError::Config(format!("unusable synthetic spec {spec:?}")));
    }
    if !(spec.skew >= 0.0 && spec.skew.is_finite()) {
        return Err(GathError::Config(format!(
            "skew must be finite and non-negative, got {}",
            spec.skew
        )));
    }
    if !(0.0..1.0).contains(&(spec.valid_fraction + spec.test_fraction)) {
        return Err(GathError::Config("split fractions must sum below 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let group_of = |e: usize| e % spec.groups;
    let members: Vec<Vec<usize>> = (0..spec.groups)
        .map(|g| (0..spec.entities).filter(|&e| group_of(e) == g).collect())
        .collect();
    let shifts: Vec<usize> = (0..spec.relations).map(|r| (r + 1) % spec.groups).collect();
    // preference[rel][group]: members of `group` in order of popularity as tails of `rel`
    let preference: Vec<Vec<Vec<usize>>> = (0..spec.relations)
        .map(|_| {
            members
                .iter()
                .map(|m| {
                    let mut m = m.clone();
                    m.shuffle(&mut rng);
                    m
                })
                .collect()
        })
        .collect();
    let pickers: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new((0..m.len()).map(|k| (k as f64 + 1.0).powf(-spec.skew))).expect("non-empty group"))
        .collect();

    let mut seen = BTreeSet::new();
    let mut triples = Vec::with_capacity(spec.triples);
    let max_attempts = 100 * spec.triples.max(1);
    let mut attempts = 0;
    while triples.len() < spec.triples {
        attempts += 1;
        if attempts > max_attempts {
            return Err(GathError::Config(format!(
                "could only place {} distinct triples for {spec:?}",
                triples.len()
            )));
        }
        let head = rng.random_range(0..spec.entities);
        let rel = rng.random_range(0..spec.relations);
        let target = (group_of(head) + shifts[rel]) % spec.groups;
        let tail = preference[rel][target][pickers[target].sample(&mut rng)];
        let t = Triple::new(head, rel, tail);
        if seen.insert(t) {
            triples.push(t);
        }
    }
    triples.shuffle(&mut rng);

    let n = triples.len();
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let n_valid = (n as f64 * spec.valid_fraction).round() as usize;
    let name = |t: &Triple| (format!("e{}", t.head), format!("r{}", t.rel), format!("e{}", t.tail));
    let test = triples[..n_test].iter().map(name).collect();
    let valid = triples[n_test..n_test + n_valid].iter().map(name).collect();
    let train = triples[n_test + n_valid..].iter().map(name).collect();
    Ok(NamedSplits { train, valid, test })
}
