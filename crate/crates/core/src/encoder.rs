//! Multi-layer graph-attention encoder.
//!
//! Each head scores every edge `(i, r, j)` twice: once from entity features
//! alone and once from entity features gated by the relation embedding
//! `r_r`. Joint query/key projections are shared by all relations, so the
//! relation-dependent parameters of a layer are one |R|×D table plus two
//! D×d_k matrices per head.
//!
//! Edge scores are formed with a sampled dot product over the edge list and
//! neighborhoods are aggregated with a segment-weighted row sum, so no
//! per-edge feature matrices are built. Joint features are computed once per
//! distinct (entity, relation) pair rather than once per edge.

use ndiff::{Graph, Indices, Tensor, Var};
use rand::Rng;

use crate::config::{Activation, EncoderConfig, Mode};
use crate::error::{GathError, Result};
use crate::kg::NeighborhoodIndex;
use crate::model::{BnSite, Phase};
use crate::params::{Bindings, ParamId, ParamStore};

/// Per-head parameters. The `w_h*`/`a_h` group belongs to the entity-specific
/// network, `w_r*`/`a_r` to the joint network; `w_v` is shared by both.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadIds {
    pub w_hq: ParamId,
    pub w_hk: ParamId,
    pub a_h: ParamId,
    pub w_rq: ParamId,
    pub w_rk: ParamId,
    pub a_r: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerIds {
    pub relations: ParamId,
    pub heads: Vec<HeadIds>,
    pub w_o: ParamId,
    pub w_h: ParamId,
    pub beta: ParamId,
    pub bn: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderIds {
    pub layers: Vec<LayerIds>,
}

impl EncoderIds {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        mode: Mode,
        num_entities: usize,
        num_relations: usize,
        rng: &mut R,
    ) -> Self {
        let (d, dk, dv, std) = (cfg.dim, cfg.d_k, cfg.d_v, cfg.init_std);
        let networks = if mode.entity_specific() { 2 } else { 1 };
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                let relations = store.add(format!("{p}.relations"), Tensor::randn([num_relations, d], std, rng));
                let heads = (0..cfg.heads)
                    .map(|m| {
                        let mut add = |name: &str, shape: &[usize]| {
                            store.add(format!("{p}.head{m}.{name}"), Tensor::randn(shape, std, rng))
                        };
                        HeadIds {
                            w_hq: add("w_hq", &[d, dk]),
                            w_hk: add("w_hk", &[d, dk]),
                            a_h: add("a_h", &[dk]),
                            w_rq: add("w_rq", &[d, dk]),
                            w_rk: add("w_rk", &[d, dk]),
                            a_r: add("a_r", &[dk]),
                            w_v: add("w_v", &[d, dv]),
                        }
                    })
                    .collect();
                let w_o = store.add(
                    format!("{p}.w_o"),
                    Tensor::randn([networks * cfg.heads * dv, d], std, rng),
                );
                let w_h = store.add(format!("{p}.w_h"), Tensor::randn([d, d], std, rng));
                let beta = store.add(format!("{p}.beta"), Tensor::ones([num_entities]));
                let bn = cfg.batch_norm.then(|| {
                    (
                        store.add(format!("{p}.bn_gamma"), Tensor::ones([d])),
                        store.add(format!("{p}.bn_beta"), Tensor::zeros([d])),
                    )
                });
                LayerIds {
                    relations,
                    heads,
                    w_o,
                    w_h,
                    beta,
                    bn,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for layer in &self.layers {
            ids.push(layer.relations);
            for h in &layer.heads {
                ids.extend([h.w_hq, h.w_hk, h.a_h, h.w_rq, h.w_rk, h.a_r, h.w_v]);
            }
            ids.extend([layer.w_o, layer.w_h, layer.beta]);
            if let Some((g, b)) = layer.bn {
                ids.extend([g, b]);
            }
        }
        ids
    }

    /// Ids of the entity-specific network, unused in `joint_only` mode.
    pub fn entity_specific_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| l.heads.iter().flat_map(|h| [h.w_hq, h.w_hk, h.a_h]))
            .collect()
    }

    /// Relation-dependent parameter count of layer `l`: the relation table
    /// plus every head's joint query and key projections.
    pub fn relation_feature_params(&self, store: &ParamStore, l: usize) -> usize {
        let layer = &self.layers[l];
        store.get(layer.relations).len()
            + layer
                .heads
                .iter()
                .map(|h| store.get(h.w_rq).len() + store.get(h.w_rk).len())
                .sum::<usize>()
    }
}

/// Edge lists and distinct (entity, relation) pairs derived from a
/// [`NeighborhoodIndex`], shared by every layer and head.
#[derive(Clone, Debug)]
pub struct EdgePlan {
    num_entities: usize,
    offsets: Indices,
    src: Indices,
    dst: Indices,
    query_heads: Indices,
    query_rels: Indices,
    edge_query: Indices,
    key_tails: Indices,
    key_rels: Indices,
    edge_key: Indices,
}

fn distinct_pairs(pairs: &[(usize, usize)]) -> (Indices, Indices, Indices) {
    let mut uniq = pairs.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let slot: Vec<usize> = pairs
        .iter()
        .map(|p| uniq.binary_search(p).expect("pair is present"))
        .collect();
    let firsts: Vec<usize> = uniq.iter().map(|p| p.0).collect();
    let seconds: Vec<usize> = uniq.iter().map(|p| p.1).collect();
    (firsts.into(), seconds.into(), slot.into())
}

impl EdgePlan {
    pub fn new(index: &NeighborhoodIndex) -> Self {
        let src = index.heads();
        let edges = index.edges();
        let dst: Vec<usize> = edges.iter().map(|e| e.tail).collect();
        let q: Vec<(usize, usize)> = src.iter().zip(edges).map(|(&h, e)| (h, e.rel)).collect();
        let k: Vec<(usize, usize)> = edges.iter().map(|e| (e.tail, e.rel)).collect();
        let (query_heads, query_rels, edge_query) = distinct_pairs(&q);
        let (key_tails, key_rels, edge_key) = distinct_pairs(&k);
        Self {
            num_entities: index.num_entities(),
            offsets: index.offsets().into(),
            src: src.into(),
            dst: dst.into(),
            query_heads,
            query_rels,
            edge_query,
            key_tails,
            key_rels,
            edge_key,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_edges(&self) -> usize {
        self.dst.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn num_query_pairs(&self) -> usize {
        self.query_heads.len()
    }

    pub fn num_key_pairs(&self) -> usize {
        self.key_tails.len()
    }
}

pub fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Tanh => g.tanh(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::Relu => g.leaky_relu(x, 0.0),
    }
}

/// `softmax_{j ∈ N_i}( leaky_relu( Σ_d q_i[d] k_j[d] a[d] ) )` over the edge
/// list, where `q`/`k` rows are addressed through `iq`/`ik`.
#[allow(clippy::too_many_arguments)]
fn edge_softmax(
    g: &mut Graph,
    q: Var,
    k: Var,
    a: Var,
    iq: &Indices,
    ik: &Indices,
    plan: &EdgePlan,
    slope: f64,
) -> Result<Var> {
    let qa = g.hadamard(q, a)?;
    let scores = g.sddmm(qa, k, iq.clone(), ik.clone())?;
    let scores = g.leaky_relu(scores, slope);
    Ok(g.segment_softmax(scores, plan.offsets.clone())?)
}

/// Entity-specific attention weights of one head, one per edge.
pub fn entity_attention(
    g: &mut Graph,
    b: &Bindings,
    h: Var,
    plan: &EdgePlan,
    head: &HeadIds,
    slope: f64,
) -> Result<Var> {
    let q = g.matmul(h, b[head.w_hq])?;
    let k = g.matmul(h, b[head.w_hk])?;
    edge_softmax(g, q, k, b[head.a_h], &plan.src, &plan.dst, plan, slope)
}

/// Entity-relation joint attention weights of one head, one per edge.
pub fn joint_attention(
    g: &mut Graph,
    b: &Bindings,
    h: Var,
    relations: Var,
    plan: &EdgePlan,
    head: &HeadIds,
    slope: f64,
) -> Result<Var> {
    let hq = g.gather_rows(h, plan.query_heads.clone())?;
    let rq = g.gather_rows(relations, plan.query_rels.clone())?;
    let jq = g.hadamard(hq, rq)?;
    let q = g.matmul(jq, b[head.w_rq])?;
    let hk = g.gather_rows(h, plan.key_tails.clone())?;
    let rk = g.gather_rows(relations, plan.key_rels.clone())?;
    let jk = g.hadamard(hk, rk)?;
    let k = g.matmul(jk, b[head.w_rk])?;
    edge_softmax(g, q, k, b[head.a_r], &plan.edge_query, &plan.edge_key, plan, slope)
}

/// Attention weights of one head; `entity` is absent in the ablation.
#[derive(Clone, Copy, Debug)]
pub struct HeadAttention {
    pub entity: Option<Var>,
    pub joint: Var,
}

/// Weighted neighborhood sums per head and network, concatenated as
/// `[entity_1, joint_1, …, entity_M, joint_M]` and projected by `W_o`.
pub fn aggregate_heads(
    g: &mut Graph,
    b: &Bindings,
    h: Var,
    plan: &EdgePlan,
    layer: &LayerIds,
    attention: &[HeadAttention],
) -> Result<Var> {
    let mut parts = Vec::with_capacity(2 * attention.len());
    for (head, att) in layer.heads.iter().zip(attention) {
        let v = g.matmul(h, b[head.w_v])?;
        if let Some(alpha) = att.entity {
            parts.push(g.spmm(alpha, v, plan.dst.clone(), plan.offsets.clone())?);
        }
        parts.push(g.spmm(att.joint, v, plan.dst.clone(), plan.offsets.clone())?);
    }
    let cat = g.concat_cols(&parts)?;
    Ok(g.matmul(cat, b[layer.w_o])?)
}

/// Attention weights of every head of `layer`.
pub fn layer_attention(
    g: &mut Graph,
    b: &Bindings,
    h: Var,
    plan: &EdgePlan,
    layer: &LayerIds,
    cfg: &EncoderConfig,
    mode: Mode,
) -> Result<Vec<HeadAttention>> {
    layer
        .heads
        .iter()
        .map(|head| {
            let entity = if mode.entity_specific() {
                Some(entity_attention(g, b, h, plan, head, cfg.attention_slope)?)
            } else {
                None
            };
            let joint = joint_attention(g, b, h, b[layer.relations], plan, head, cfg.attention_slope)?;
            Ok(HeadAttention { entity, joint })
        })
        .collect()
}

/// `H_l = σ(aggregate + β ⊙ (H_{l-1} W_h))`.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward(
    g: &mut Graph,
    b: &Bindings,
    h_in: Var,
    plan: &EdgePlan,
    layer: &LayerIds,
    index: usize,
    cfg: &EncoderConfig,
    mode: Mode,
    phase: &mut Phase<'_>,
) -> Result<Var> {
    let h = phase.dropout(g, h_in, cfg.input_dropout)?;
    let attention = layer_attention(g, b, h, plan, layer, cfg, mode)?;
    let agg = aggregate_heads(g, b, h, plan, layer, &attention)?;
    let agg = phase.dropout(g, agg, cfg.output_dropout)?;
    let own = g.matmul(h, b[layer.w_h])?;
    let own = g.scale_rows(own, b[layer.beta])?;
    let pre = g.add(agg, own)?;
    let mut out = activate(g, pre, cfg.activation);
    if let Some((gamma, beta)) = layer.bn {
        out = phase.batch_norm(g, out, b[gamma], b[beta], BnSite::Encoder(index))?;
    }
    if !g.value(out).all_finite() {
        return Err(GathError::Numeric(format!(
            "encoder layer {index} produced non-finite activations"
        )));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn encode(
    g: &mut Graph,
    b: &Bindings,
    ids: &EncoderIds,
    h0: Var,
    plan: &EdgePlan,
    cfg: &EncoderConfig,
    mode: Mode,
    phase: &mut Phase<'_>,
) -> Result<Var> {
    let mut h = h0;
    for (l, layer) in ids.layers.iter().enumerate() {
        h = layer_forward(g, b, h, plan, layer, l, cfg, mode, phase)?;
    }
    Ok(h)
}
