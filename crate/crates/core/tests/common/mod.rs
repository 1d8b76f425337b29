//! Shared fixtures and plain-loop reference implementations.
#![allow(dead_code)]

use gath::config::{Mode, RunConfig};
use gath::kg::{KnowledgeGraph, Triple};
use gath::model::GathModel;
use ndiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn named(rows: &[(&str, &str, &str)]) -> Vec<(String, String, String)> {
    rows.iter()
        .map(|(h, r, t)| (h.to_string(), r.to_string(), t.to_string()))
        .collect()
}

pub fn graph(train: &[(&str, &str, &str)]) -> KnowledgeGraph {
    KnowledgeGraph::from_named(&named(train), &[], &[]).unwrap()
}

/// Six entities, two relations, eight triples.
pub fn six_entity_graph() -> KnowledgeGraph {
    graph(&[
        ("a", "likes", "b"),
        ("a", "likes", "c"),
        ("b", "knows", "c"),
        ("c", "likes", "d"),
        ("d", "knows", "e"),
        ("e", "likes", "a"),
        ("f", "knows", "a"),
        ("b", "likes", "f"),
    ])
}

/// Random graph over ids; every entity id below `entities` exists in the
/// vocabulary even without edges.
pub fn random_graph(entities: usize, relations: usize, triples: usize, seed: u64) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vocab = gath::kg::Vocab::new();
    for e in 0..entities {
        vocab.intern_entity(&format!("e{e}"));
    }
    for r in 0..relations {
        vocab.intern_relation(&format!("r{r}")).unwrap();
    }
    let train = (0..triples)
        .map(|_| {
            Triple::new(
                rng.random_range(0..entities),
                rng.random_range(0..relations),
                rng.random_range(0..entities),
            )
        })
        .collect();
    KnowledgeGraph::from_parts(vocab, train, Vec::new(), Vec::new()).unwrap()
}

/// Small encoder and decoder with no dropout, for exact comparisons.
pub fn small_config(mode: Mode) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder.dim = 8;
    cfg.encoder.d_k = 3;
    cfg.encoder.d_v = 4;
    cfg.encoder.input_dropout = 0.0;
    cfg.encoder.output_dropout = 0.0;
    cfg.decoder.reshape = [2, 4];
    cfg.decoder.channels = 2;
    cfg.decoder.kernel = [2, 2];
    cfg.decoder.input_dropout = 0.0;
    cfg.decoder.feature_dropout = 0.0;
    cfg.decoder.hidden_dropout = 0.0;
    cfg.train.mode = mode;
    cfg
}

/// Model whose every parameter is redrawn with a wide Gaussian so that
/// attention weights and activations are far from degenerate.
pub fn random_model(cfg: &RunConfig, kg: &KnowledgeGraph, seed: u64) -> GathModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = GathModel::new(&cfg.model(), kg.num_entities(), kg.num_relations(), &mut rng).unwrap();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let shape = model.params.get(id).shape().to_vec();
        *model.params.get_mut(id) = Tensor::randn(shape, 0.7, &mut rng);
    }
    model
}

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn vec_mat(x: &[f64], m: &Tensor) -> Vec<f64> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    assert_eq!(x.len(), rows);
    (0..cols)
        .map(|c| (0..rows).map(|r| x[r] * m.get(&[r, c])).sum())
        .collect()
}

pub fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Neighbors `(rel, tail)` of each entity, in train_aug order.
pub fn neighborhoods(kg: &KnowledgeGraph) -> Vec<Vec<(usize, usize)>> {
    let mut n = vec![Vec::new(); kg.num_entities()];
    for t in &kg.train_aug {
        n[t.head].push((t.rel, t.tail));
    }
    n
}

fn param<'a>(model: &'a GathModel, name: &str) -> &'a Tensor {
    let id = model.params.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    model.params.get(id)
}

#[allow(clippy::too_many_arguments)]
fn attention(
    h: &Mat,
    nbrs: &[(usize, usize)],
    i: usize,
    wq: &Tensor,
    wk: &Tensor,
    a: &Tensor,
    gate: Option<&Mat>,
    slope: f64,
) -> Vec<f64> {
    let feat = |e: usize, r: usize| -> Vec<f64> {
        match gate {
            Some(rel) => h[e].iter().zip(&rel[r]).map(|(x, y)| x * y).collect(),
            None => h[e].clone(),
        }
    };
    let scores: Vec<f64> = nbrs
        .iter()
        .map(|&(r, j)| {
            let q = vec_mat(&feat(i, r), wq);
            let k = vec_mat(&feat(j, r), wk);
            let s: f64 = (0..q.len()).map(|d| q[d] * k[d] * a.data()[d]).sum();
            leaky(s, slope)
        })
        .collect();
    softmax(&scores)
}

/// Per-entity, per-neighbor attention weights of head `m` of layer `l`:
/// `(entity_specific, joint)`.
pub fn oracle_attention(model: &GathModel, kg: &KnowledgeGraph, h: &Mat, l: usize, m: usize) -> (Mat, Mat) {
    let slope = model.arch.config.encoder.attention_slope;
    let p = |n: &str| param(model, &format!("encoder.{l}.head{m}.{n}"));
    let rel = mat(param(model, &format!("encoder.{l}.relations")));
    let nbrs = neighborhoods(kg);
    let ent = (0..h.len())
        .map(|i| attention(h, &nbrs[i], i, p("w_hq"), p("w_hk"), p("a_h"), None, slope))
        .collect();
    let joint = (0..h.len())
        .map(|i| attention(h, &nbrs[i], i, p("w_rq"), p("w_rk"), p("a_r"), Some(&rel), slope))
        .collect();
    (ent, joint)
}

/// `W_o`-projected multi-head aggregate of layer `l`.
pub fn oracle_aggregate(model: &GathModel, kg: &KnowledgeGraph, h: &Mat, l: usize) -> Mat {
    let cfg = &model.arch.config.encoder;
    let mode = model.arch.config.mode;
    let nbrs = neighborhoods(kg);
    let w_o = param(model, &format!("encoder.{l}.w_o"));
    let heads: Vec<(Mat, Mat)> = (0..cfg.heads).map(|m| oracle_attention(model, kg, h, l, m)).collect();
    (0..h.len())
        .map(|i| {
            let mut cat = Vec::new();
            for (m, (ent, joint)) in heads.iter().enumerate() {
                let w_v = param(model, &format!("encoder.{l}.head{m}.w_v"));
                let mut sum = |alpha: &[f64]| {
                    let mut acc = vec![0.0; cfg.d_v];
                    for (k, &(_, j)) in nbrs[i].iter().enumerate() {
                        let v = vec_mat(&h[j], w_v);
                        for d in 0..cfg.d_v {
                            acc[d] += alpha[k] * v[d];
                        }
                    }
                    cat.extend(acc);
                };
                if mode.entity_specific() {
                    sum(&ent[i]);
                }
                sum(&joint[i]);
            }
            vec_mat(&cat, w_o)
        })
        .collect()
}

/// One encoder layer in evaluation mode (tanh residual update, no batch
/// normalization).
pub fn oracle_layer(model: &GathModel, kg: &KnowledgeGraph, h: &Mat, l: usize) -> Mat {
    let agg = oracle_aggregate(model, kg, h, l);
    let w_h = param(model, &format!("encoder.{l}.w_h"));
    let beta = param(model, &format!("encoder.{l}.beta"));
    (0..h.len())
        .map(|i| {
            let own = vec_mat(&h[i], w_h);
            (0..own.len())
                .map(|d| (agg[i][d] + beta.data()[i] * own[d]).tanh())
                .collect()
        })
        .collect()
}

pub fn oracle_encode(model: &GathModel, kg: &KnowledgeGraph) -> Mat {
    let mut h = mat(param(model, "entities"));
    for l in 0..model.arch.config.encoder.layers {
        h = oracle_layer(model, kg, &h, l);
    }
    h
}

pub fn max_abs_diff(a: &Mat, b: &[f64]) -> f64 {
    a.iter()
        .flatten()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
