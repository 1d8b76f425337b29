//! Filtered link-prediction ranking and metric aggregation.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EdgePlan;
use crate::error::{GathError, Result};
use crate::kg::{Bucket, DegreeBuckets, KnowledgeGraph, Split};
use crate::model::GathModel;

/// True tails of every `(head, relation)` across all splits, both directions.
#[derive(Clone, Debug, Default)]
pub struct FilterSet {
    tails: HashMap<(usize, usize), Vec<usize>>,
}

impl FilterSet {
    pub fn build(kg: &KnowledgeGraph) -> Self {
        let raw = kg.vocab.num_raw_relations();
        let mut tails: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for t in kg.train.iter().chain(&kg.valid).chain(&kg.test) {
            tails.entry((t.head, t.rel)).or_default().push(t.tail);
            tails.entry((t.tail, t.rel + raw)).or_default().push(t.head);
        }
        for v in tails.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        Self { tails }
    }

    /// Sorted true tails of `(head, rel)`.
    pub fn tails(&self, head: usize, rel: usize) -> &[usize] {
        self.tails.get(&(head, rel)).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, head: usize, rel: usize, tail: usize) -> bool {
        self.tails(head, rel).binary_search(&tail).is_ok()
    }
}

/// `1 + #{i ∉ filter, i ≠ gold : scores[i] ≥ scores[gold]}`. Filtered
/// candidates drop below every score; ties rank the gold entity last.
pub fn filtered_rank(scores: &[f64], gold: usize, filter: &[usize]) -> Result<usize> {
    if gold >= scores.len() {
        return Err(GathError::Data(format!(
            "gold entity {gold} outside 0..{}",
            scores.len()
        )));
    }
    let s = scores[gold];
    if s.is_nan() {
        return Err(GathError::Numeric(format!("score of gold entity {gold} is NaN")));
    }
    let mut ahead = scores.iter().enumerate().filter(|&(i, &x)| i != gold && x >= s).count();
    let owned;
    let filter = if filter.windows(2).all(|w| w[0] < w[1]) {
        filter
    } else {
        let mut v = filter.to_vec();
        v.sort_unstable();
        v.dedup();
        owned = v;
        &owned
    };
    for &f in filter {
        if f == gold {
            continue;
        }
        if scores.get(f).is_some_and(|&x| x >= s) {
            ahead -= 1;
        }
    }
    Ok(ahead + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mrr: f64,
    pub mr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Metrics {
    /// `None` for an empty rank list.
    pub fn from_ranks(ranks: &[usize]) -> Option<Self> {
        if ranks.is_empty() {
            return None;
        }
        let n = ranks.len() as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Some(Self {
            count: ranks.len(),
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            mr: ranks.iter().map(|&r| r as f64).sum::<f64>() / n,
            hits1: hits(1),
            hits3: hits(3),
            hits10: hits(10),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `(h, r, ?)` with gold `t`.
    Tail,
    /// `(t, r_reverse, ?)` with gold `h`.
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub head: usize,
    pub rel: usize,
    pub gold: usize,
    pub direction: Direction,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: Bucket,
    /// Absent when no query falls into the bucket.
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketTable {
    pub name: String,
    pub rows: Vec<BucketRow>,
}

impl BucketTable {
    pub fn build(name: &str, queries: &[QueryRank], bucket_of: impl Fn(&QueryRank) -> Bucket) -> Self {
        let rows = Bucket::ALL
            .iter()
            .map(|&bucket| {
                let ranks: Vec<usize> = queries
                    .iter()
                    .filter(|q| bucket_of(q) == bucket)
                    .map(|q| q.rank)
                    .collect();
                BucketRow {
                    bucket,
                    metrics: Metrics::from_ranks(&ranks),
                }
            })
            .collect();
        Self {
            name: name.into(),
            rows,
        }
    }

    pub fn row(&self, bucket: Bucket) -> Option<&Metrics> {
        self.rows
            .iter()
            .find(|r| r.bucket == bucket)
            .and_then(|r| r.metrics.as_ref())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub split: String,
    pub metrics: Metrics,
    /// Node buckets of the gold entity, by query-head entity, and relation
    /// buckets of the raw relation.
    pub buckets: Vec<BucketTable>,
    pub queries: Vec<QueryRank>,
}

impl RankingReport {
    pub fn from_queries(split: &str, queries: Vec<QueryRank>, buckets: &DegreeBuckets) -> Result<Self> {
        let ranks: Vec<usize> = queries.iter().map(|q| q.rank).collect();
        let metrics = Metrics::from_ranks(&ranks)
            .ok_or_else(|| GathError::Data(format!("split `{split}` has no triples to rank")))?;
        let tables = bucket_report(&queries, buckets);
        Ok(Self {
            split: split.into(),
            metrics,
            buckets: tables,
            queries,
        })
    }

    pub fn table(&self, name: &str) -> Option<&BucketTable> {
        self.buckets.iter().find(|t| t.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| GathError::Data(format!("report json: {e}")))
    }

    /// `metric,value` rows, a blank line, then one row per bucket.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().flexible(true).from_writer(w);
        let csv_err = |e: csv::Error| GathError::Data(format!("csv: {e}"));
        out.write_record(["metric", "value"]).map_err(csv_err)?;
        let m = &self.metrics;
        for (k, v) in [
            ("count", m.count as f64),
            ("mrr", m.mrr),
            ("mr", m.mr),
            ("hits@1", m.hits1),
            ("hits@3", m.hits3),
            ("hits@10", m.hits10),
        ] {
            out.write_record([k.to_string(), v.to_string()]).map_err(csv_err)?;
        }
        out.write_record([""]).map_err(csv_err)?;
        out.write_record(["table", "bucket", "count", "mrr", "mr", "hits@1", "hits@3", "hits@10"])
            .map_err(csv_err)?;
        for t in &self.buckets {
            for row in &t.rows {
                let mut rec = vec![t.name.clone(), row.bucket.name().to_string()];
                match &row.metrics {
                    Some(m) => {
                        rec.extend([m.count as f64, m.mrr, m.mr, m.hits1, m.hits3, m.hits10].map(|x| x.to_string()))
                    }
                    None => rec.push("absent".into()),
                }
                out.write_record(&rec).map_err(csv_err)?;
            }
        }
        out.flush().map_err(|e| GathError::Data(format!("csv: {e}")))?;
        Ok(())
    }

    /// Human-readable summary with the three bucket tables.
    pub fn render(&self) -> String {
        let m = &self.metrics;
        let mut s = format!(
            "split={} queries={} MRR={:.3} MR={:.3} Hits@1={:.3} Hits@3={:.3} Hits@10={:.3}\n",
            self.split, m.count, m.mrr, m.mr, m.hits1, m.hits3, m.hits10
        );
        for t in &self.buckets {
            s.push_str(&format!("{}\n", t.name));
            for row in &t.rows {
                match &row.metrics {
                    Some(m) => s.push_str(&format!(
                        "  {:<8} n={:<6} MRR={:.3} Hits@10={:.3}\n",
                        row.bucket.name(),
                        m.count,
                        m.mrr,
                        m.hits10
                    )),
                    None => s.push_str(&format!("  {:<8} absent\n", row.bucket.name())),
                }
            }
        }
        s
    }
}

pub const NODE_BY_GOLD: &str = "node_bucket_by_gold";
pub const NODE_BY_HEAD: &str = "node_bucket_by_query_head";
pub const RELATION: &str = "relation_bucket";

pub fn bucket_report(queries: &[QueryRank], buckets: &DegreeBuckets) -> Vec<BucketTable> {
    vec![
        BucketTable::build(NODE_BY_GOLD, queries, |q| buckets.node_bucket[q.gold]),
        BucketTable::build(NODE_BY_HEAD, queries, |q| buckets.node_bucket[q.head]),
        BucketTable::build(RELATION, queries, |q| buckets.relation(q.rel)),
    ]
}

/// Scores queries against every entity.
pub trait TailScorer: Sync {
    fn num_entities(&self) -> usize;

    /// Row-major B×|E| scores of `(heads[i], rels[i], ?)`.
    fn score_batch(&self, heads: &[usize], rels: &[usize]) -> Result<Vec<f64>>;
}

/// Evaluation-mode model with entity embeddings computed once.
pub struct ModelScorer<'a> {
    model: &'a GathModel,
    entities: ndiff::Tensor,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a GathModel, plan: &EdgePlan) -> Result<Self> {
        Ok(Self {
            model,
            entities: model.entity_embeddings(plan)?,
        })
    }
}

impl TailScorer for ModelScorer<'_> {
    fn num_entities(&self) -> usize {
        self.model.arch.num_entities
    }

    fn score_batch(&self, heads: &[usize], rels: &[usize]) -> Result<Vec<f64>> {
        Ok(self.model.score_queries(&self.entities, heads, rels)?.into_data())
    }
}

/// Ranks both directions of every triple of `split`. Batches are scored in
/// parallel and collected in order.
pub fn evaluate(
    kg: &KnowledgeGraph,
    scorer: &dyn TailScorer,
    split: Split,
    filter: &FilterSet,
    buckets: &DegreeBuckets,
    batch_size: usize,
) -> Result<RankingReport> {
    let triples = kg.split(split);
    let raw = kg.vocab.num_raw_relations();
    let mut queries = Vec::with_capacity(2 * triples.len());
    for t in triples {
        queries.push((t.head, t.rel, t.tail, Direction::Tail));
        queries.push((t.tail, t.rel + raw, t.head, Direction::Head));
    }
    let ne = scorer.num_entities();
    let ranked: Vec<Vec<QueryRank>> = queries
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let heads: Vec<usize> = chunk.iter().map(|q| q.0).collect();
            let rels: Vec<usize> = chunk.iter().map(|q| q.1).collect();
            let scores = scorer.score_batch(&heads, &rels)?;
            chunk
                .iter()
                .enumerate()
                .map(|(i, &(head, rel, gold, direction))| {
                    let row = &scores[i * ne..(i + 1) * ne];
                    Ok(QueryRank {
                        head,
                        rel,
                        gold,
                        direction,
                        rank: filtered_rank(row, gold, filter.tails(head, rel))?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    RankingReport::from_queries(split.name(), ranked.into_iter().flatten().collect(), buckets)
}

/// Writes `<split>_report.csv` and `<split>_report.json` into `dir`.
pub fn write_reports(report: &RankingReport, dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| GathError::io(dir, e))?;
    let csv_path = dir.join(format!("{}_report.csv", report.split));
    let json_path = dir.join(format!("{}_report.json", report.split));
    let f = std::fs::File::create(&csv_path).map_err(|e| GathError::io(&csv_path, e))?;
    report.write_csv(std::io::BufWriter::new(f))?;
    std::fs::write(&json_path, report.to_json()).map_err(|e| GathError::io(&json_path, e))?;
    Ok((csv_path, json_path))
}
