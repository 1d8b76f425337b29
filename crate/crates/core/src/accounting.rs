//! Parameter counts.
//!
//! With `n` relation embeddings of width `D` and joint projections of total
//! width `F`, shared projections need `n·D + 2·D·F` relation-dependent
//! parameters where relation-specific query/key matrices would need
//! `2·n·D·F`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::model::GathModel;

pub fn shared_relation_features(n: u64, d: u64, f: u64) -> u64 {
    n * d + 2 * d * f
}

pub fn per_relation_matrices(n: u64, d: u64, f: u64) -> u64 {
    2 * n * d * f
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCount {
    pub layer: usize,
    pub relation_features: usize,
    pub entity_attention: usize,
    pub values_and_output: usize,
    pub residual: usize,
    pub batch_norm: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub num_entities: usize,
    pub num_relations: usize,
    pub dim: usize,
    /// Summed joint projection width over heads (`heads · d_k`).
    pub proj: usize,
    pub entity_table: usize,
    pub layers: Vec<LayerCount>,
    pub decoder: usize,
    /// Parameters read in the configured mode.
    pub total: usize,
    pub shared_relation_features: u64,
    pub per_relation_matrices: u64,
}

/// Counts from an instantiated model, so every figure matches the tensors
/// that training would update.
pub fn param_report(cfg: &RunConfig, num_entities: usize, num_relations: usize) -> Result<ParamReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = GathModel::new(&cfg.model(), num_entities, num_relations, &mut rng)?;
    let p = &model.params;
    let len = |id| p.get(id).len();
    let mode = cfg.train.mode;
    let layers = if mode.uses_encoder() {
        model
            .arch
            .encoder
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let relation_features = model.arch.encoder.relation_feature_params(p, l);
                let entity_attention = if mode.entity_specific() {
                    layer.heads.iter().map(|h| len(h.w_hq) + len(h.w_hk) + len(h.a_h)).sum()
                } else {
                    0
                };
                let attention_vectors: usize = layer.heads.iter().map(|h| len(h.a_r)).sum();
                let values_and_output = layer.heads.iter().map(|h| len(h.w_v)).sum::<usize>() + len(layer.w_o);
                let residual = len(layer.w_h) + len(layer.beta);
                let batch_norm = layer.bn.map_or(0, |(g, b)| len(g) + len(b));
                LayerCount {
                    layer: l,
                    relation_features,
                    entity_attention,
                    values_and_output: values_and_output + attention_vectors,
                    residual,
                    batch_norm,
                    total: relation_features
                        + entity_attention
                        + values_and_output
                        + attention_vectors
                        + residual
                        + batch_norm,
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let decoder = model.arch.decoder.all_ids().into_iter().map(len).sum();
    let total = model.arch.used_ids().into_iter().map(len).sum();
    let (n, d, f) = (
        num_relations as u64,
        cfg.encoder.dim as u64,
        (cfg.encoder.heads * cfg.encoder.d_k) as u64,
    );
    Ok(ParamReport {
        num_entities,
        num_relations,
        dim: cfg.encoder.dim,
        proj: f as usize,
        entity_table: len(model.arch.entities),
        layers,
        decoder,
        total,
        shared_relation_features: shared_relation_features(n, d, f),
        per_relation_matrices: per_relation_matrices(n, d, f),
    })
}

/// `1234567` → `"1,234,567"`.
pub fn group_thousands(x: u64) -> String {
    let digits = x.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}
