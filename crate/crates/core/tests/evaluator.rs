mod common;

use std::collections::HashMap;

use common::*;
use gath::evaluator::{
    evaluate, filtered_rank, BucketTable, Direction, FilterSet, Metrics, QueryRank, RankingReport, TailScorer,
    NODE_BY_GOLD, NODE_BY_HEAD, RELATION,
};
use gath::kg::{bucket_degrees, Bucket, KnowledgeGraph, Split, Triple, Vocab};
use gath::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sorts the unfiltered candidates by descending score, equal scores
/// placing the gold entity last, and returns the gold's 1-based position.
fn sort_and_index(scores: &[f64], gold: usize, filter: &[usize]) -> usize {
    let mut spred: Vec<(f64, bool, usize)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i == gold || !filter.contains(i))
        .map(|(i, &s)| (s, i == gold, i))
        .collect();
    spred.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    spred.iter().position(|c| c.2 == gold).unwrap() + 1
}

#[test]
fn filtered_rank_agrees_with_sort_and_index() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let n = rng.random_range(1..=30);
        let levels = rng.random_range(1..=6);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 - 2.0).collect();
        let gold = rng.random_range(0..n);
        let mut filter: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.3)).collect();
        if rng.random_bool(0.5) {
            filter.reverse();
        }
        let got = filtered_rank(&scores, gold, &filter).unwrap();
        assert_eq!(
            got,
            sort_and_index(&scores, gold, &filter),
            "case {case}: {scores:?} gold {gold} filter {filter:?}"
        );
    }
}

proptest! {
    #[test]
    fn filtering_never_raises_the_gold_rank(
        scores in prop::collection::vec(-3i32..3, 2..30),
        gold_seed in any::<usize>(),
        filter_seed in prop::collection::vec(any::<usize>(), 0..10),
        extra_seed in any::<usize>(),
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let n = scores.len();
        let gold = gold_seed % n;
        let mut filter: Vec<usize> = filter_seed.iter().map(|s| s % n).filter(|&i| i != gold).collect();
        filter.sort_unstable();
        filter.dedup();
        let before = filtered_rank(&scores, gold, &filter).unwrap();
        let extra = extra_seed % n;
        prop_assume!(extra != gold);
        let mut more = filter.clone();
        more.push(extra);
        more.sort_unstable();
        more.dedup();
        let after = filtered_rank(&scores, gold, &more).unwrap();
        prop_assert!(after <= before);
    }
}

#[test]
fn nan_gold_score_is_a_numeric_error() {
    let err = filtered_rank(&[0.0, f64::NAN], 1, &[]).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn metrics_of_reference_ranks() {
    let m = Metrics::from_ranks(&[1, 2, 4]).unwrap();
    assert!((m.mrr - 0.583_333_333_333_333_3).abs() < 1e-9);
    assert!((m.mr - 7.0 / 3.0).abs() < 1e-9);
    assert_eq!(m.hits1, 1.0 / 3.0);
    assert_eq!(m.hits3, 2.0 / 3.0);
    assert_eq!(m.hits10, 1.0);
    assert!(Metrics::from_ranks(&[]).is_none());
}

struct RandomScorer {
    entities: usize,
    seed: u64,
}

impl TailScorer for RandomScorer {
    fn num_entities(&self) -> usize {
        self.entities
    }

    fn score_batch(&self, heads: &[usize], rels: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(heads.len() * self.entities);
        for (&h, &r) in heads.iter().zip(rels) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ((h as u64) << 20) ^ ((r as u64) << 40));
            out.extend((0..self.entities).map(|_| rng.random::<f64>()));
        }
        Ok(out)
    }
}

/// Scores from an explicit `(head, rel, tail) → score` table, zero elsewhere.
struct TableScorer {
    entities: usize,
    table: HashMap<(usize, usize, usize), f64>,
}

impl TailScorer for TableScorer {
    fn num_entities(&self) -> usize {
        self.entities
    }

    fn score_batch(&self, heads: &[usize], rels: &[usize]) -> Result<Vec<f64>> {
        Ok(heads
            .iter()
            .zip(rels)
            .flat_map(|(&h, &r)| (0..self.entities).map(move |t| self.table.get(&(h, r, t)).copied().unwrap_or(0.0)))
            .collect())
    }
}

fn graph_with_test(entities: usize, relations: usize, train: usize, test: usize, seed: u64) -> KnowledgeGraph {
    let base = random_graph(entities, relations, train + test, seed);
    let (train, test) = base.train.split_at(train);
    KnowledgeGraph::from_parts(base.vocab.clone(), train.to_vec(), Vec::new(), test.to_vec()).unwrap()
}

fn report(kg: &KnowledgeGraph, scorer: &dyn TailScorer, split: Split) -> RankingReport {
    evaluate(kg, scorer, split, &FilterSet::build(kg), &bucket_degrees(kg), 64).unwrap()
}

#[test]
fn random_scorer_mean_rank_is_near_uniform_expectation() {
    let kg = graph_with_test(100, 3, 40, 250, 2);
    let r = report(&kg, &RandomScorer { entities: 100, seed: 3 }, Split::Test);
    assert_eq!(r.metrics.count, 500);
    let expected = (100.0 + 1.0) / 2.0;
    assert!((r.metrics.mr - expected).abs() < 0.1 * expected, "MR {}", r.metrics.mr);
}

#[test]
fn memorizing_scorer_is_perfect_on_seen_triples() {
    let base = random_graph(20, 2, 60, 4);
    let test = base.train[..15].to_vec();
    let kg = KnowledgeGraph::from_parts(base.vocab.clone(), base.train.clone(), Vec::new(), test).unwrap();
    let raw = kg.vocab.num_raw_relations();
    let mut table = HashMap::new();
    for t in &kg.train {
        table.insert((t.head, t.rel, t.tail), 1.0);
        table.insert((t.tail, t.rel + raw, t.head), 1.0);
    }
    let r = report(&kg, &TableScorer { entities: 20, table }, Split::Test);
    assert_eq!(r.metrics.mrr, 1.0);
    assert_eq!(r.metrics.mr, 1.0);
}

#[test]
fn both_directions_are_ranked() {
    let kg = graph_with_test(10, 2, 10, 5, 5);
    let r = report(&kg, &RandomScorer { entities: 10, seed: 6 }, Split::Test);
    let raw = kg.vocab.num_raw_relations();
    for (t, pair) in kg.test.iter().zip(r.queries.chunks(2)) {
        assert_eq!(
            (pair[0].head, pair[0].rel, pair[0].gold, pair[0].direction),
            (t.head, t.rel, t.tail, Direction::Tail)
        );
        assert_eq!(
            (pair[1].head, pair[1].rel, pair[1].gold, pair[1].direction),
            (t.tail, t.rel + raw, t.head, Direction::Head)
        );
    }
}

#[test]
fn reversed_graph_with_swapped_tables_swaps_directions() {
    let mut vocab = Vocab::new();
    for e in ["a", "b", "c", "d", "e"] {
        vocab.intern_entity(e);
    }
    vocab.intern_relation("r").unwrap();
    vocab.intern_relation("s").unwrap();
    let raw = 2;
    let train = vec![
        Triple::new(0, 0, 1),
        Triple::new(1, 1, 2),
        Triple::new(3, 0, 2),
        Triple::new(4, 1, 0),
    ];
    let test = vec![Triple::new(2, 0, 3), Triple::new(0, 1, 4), Triple::new(1, 0, 4)];
    let flip = |ts: &[Triple]| {
        ts.iter()
            .map(|t| Triple::new(t.tail, t.rel, t.head))
            .collect::<Vec<_>>()
    };
    let forward = KnowledgeGraph::from_parts(vocab.clone(), train.clone(), Vec::new(), test.clone()).unwrap();
    let backward = KnowledgeGraph::from_parts(vocab, flip(&train), Vec::new(), flip(&test)).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut table = HashMap::new();
    let mut swapped = HashMap::new();
    for h in 0..5 {
        for r in 0..2 * raw {
            for t in 0..5 {
                let s = rng.random_range(0..4) as f64;
                table.insert((h, r, t), s);
                swapped.insert((h, (r + raw) % (2 * raw), t), s);
            }
        }
    }
    let a = report(&forward, &TableScorer { entities: 5, table }, Split::Test);
    let b = report(
        &backward,
        &TableScorer {
            entities: 5,
            table: swapped,
        },
        Split::Test,
    );
    for (qa, qb) in a.queries.chunks(2).zip(b.queries.chunks(2)) {
        assert_eq!(qa[0].rank, qb[1].rank);
        assert_eq!(qa[1].rank, qb[0].rank);
    }
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn bucket_means_recompose_to_global_metrics() {
    let kg = graph_with_test(60, 4, 500, 200, 8);
    let r = report(&kg, &RandomScorer { entities: 60, seed: 9 }, Split::Test);
    for name in [NODE_BY_GOLD, NODE_BY_HEAD, RELATION] {
        let t = r.table(name).unwrap();
        let (mut n, mut mrr, mut hits10) = (0usize, 0.0, 0.0);
        for row in t.rows.iter().filter_map(|row| row.metrics) {
            n += row.count;
            mrr += row.count as f64 * row.mrr;
            hits10 += row.count as f64 * row.hits10;
        }
        assert_eq!(n, r.metrics.count);
        assert!((mrr / n as f64 - r.metrics.mrr).abs() < 1e-12);
        assert!((hits10 / n as f64 - r.metrics.hits10).abs() < 1e-12);
    }
}

#[test]
fn bucket_rows_follow_hand_aggregation() {
    let q = |gold: usize, rank: usize| QueryRank {
        head: 0,
        rel: 0,
        gold,
        direction: Direction::Tail,
        rank,
    };
    let queries = vec![q(0, 1), q(0, 4), q(1, 2), q(1, 2), q(1, 10)];
    let bucket = |r: &QueryRank| if r.gold == 0 { Bucket::Sparse } else { Bucket::Dense };
    let t = BucketTable::build("hand", &queries, bucket);
    let sparse = t.row(Bucket::Sparse).unwrap();
    assert_eq!(sparse.count, 2);
    assert!((sparse.mrr - (1.0 + 0.25) / 2.0).abs() < 1e-15);
    let dense = t.row(Bucket::Dense).unwrap();
    assert!((dense.mrr - (0.5 + 0.5 + 0.1) / 3.0).abs() < 1e-15);
    assert_eq!(dense.hits1, 0.0);
    assert!(t.row(Bucket::Moderate).is_none());

    let all = BucketTable::build("all", &queries, |_| Bucket::Moderate);
    assert_eq!(
        all.row(Bucket::Moderate).copied(),
        Metrics::from_ranks(&[1, 4, 2, 2, 10])
    );
}

#[test]
fn toy_graph_has_only_sparse_rows() {
    let kg = six_entity_graph();
    let kg =
        KnowledgeGraph::from_parts(kg.vocab.clone(), kg.train.clone(), Vec::new(), kg.train[..3].to_vec()).unwrap();
    let r = report(&kg, &RandomScorer { entities: 6, seed: 10 }, Split::Test);
    for t in &r.buckets {
        assert!(t.row(Bucket::Sparse).is_some());
        assert!(t.row(Bucket::Moderate).is_none());
        assert!(t.row(Bucket::Dense).is_none());
    }
    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.contains(&format!("{NODE_BY_GOLD},dense,absent")));
}

#[test]
fn reports_round_trip_through_json_and_csv() {
    let kg = graph_with_test(30, 3, 80, 20, 11);
    let r = report(&kg, &RandomScorer { entities: 30, seed: 12 }, Split::Test);
    assert_eq!(RankingReport::from_json(&r.to_json()).unwrap(), r);

    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(csv.as_slice());
    let mut values = HashMap::new();
    for rec in reader.records() {
        let rec = rec.unwrap();
        if rec.len() == 2 {
            values.insert(rec[0].to_string(), rec[1].parse::<f64>().unwrap());
        }
    }
    assert_eq!(values["mrr"], r.metrics.mrr);
    assert_eq!(values["mr"], r.metrics.mr);
    assert_eq!(values["hits@10"], r.metrics.hits10);
    assert_eq!(values["count"], r.metrics.count as f64);
}

#[test]
fn filter_covers_all_splits_in_both_directions() {
    let kg = KnowledgeGraph::from_named(
        &named(&[("a", "r", "b")]),
        &named(&[("a", "r", "c")]),
        &named(&[("d", "r", "b")]),
    )
    .unwrap();
    let f = FilterSet::build(&kg);
    let id = |e: &str| kg.vocab.entity_id(e).unwrap();
    assert_eq!(f.tails(id("a"), 0), &[id("b"), id("c")]);
    assert_eq!(f.tails(id("b"), 1), &[id("a"), id("d")]);
    assert!(f.contains(id("c"), 1, id("a")));
    assert!(!f.contains(id("d"), 0, id("c")));
}
