//! Convolutional scorer over stacked `(h, r, h⊙r)` inputs.

use ndiff::{Graph, Tensor, Var};
use rand::Rng;

use crate::config::DecoderConfig;
use crate::encoder::activate;
use crate::error::Result;
use crate::model::{BnSite, Phase};
use crate::params::{Bindings, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderIds {
    pub relations: ParamId,
    pub kernels: ParamId,
    pub w_fc: ParamId,
    pub bn: Option<(ParamId, ParamId)>,
    pub entity_bias: Option<ParamId>,
}

impl DecoderIds {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        dim: usize,
        num_entities: usize,
        num_relations: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let relations = store.add("decoder.relations", Tensor::randn([num_relations, dim], std, rng));
        let kernels = store.add(
            "decoder.kernels",
            Tensor::randn([cfg.channels, 1, cfg.kernel[0], cfg.kernel[1]], std, rng),
        );
        let w_fc = store.add("decoder.w_fc", Tensor::randn([cfg.flat_features(), dim], std, rng));
        let bn = cfg.batch_norm.then(|| {
            (
                store.add("decoder.bn_gamma", Tensor::ones([dim])),
                store.add("decoder.bn_beta", Tensor::zeros([dim])),
            )
        });
        let entity_bias = cfg
            .entity_bias
            .then(|| store.add("decoder.entity_bias", Tensor::zeros([num_entities])));
        Self {
            relations,
            kernels,
            w_fc,
            bn,
            entity_bias,
        }
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.relations, self.kernels, self.w_fc];
        if let Some((g, b)) = self.bn {
            ids.extend([g, b]);
        }
        ids.extend(self.entity_bias);
        ids
    }
}

/// Stacks the d_w×d_h images of `h`, `r` and `h⊙r` vertically into one
/// single-channel `[B, 1, 3·d_w, d_h]` input. Row-major reshaping makes the
/// vertical stack the same buffer as the concatenated vectors.
pub fn stack_input(g: &mut Graph, h: Var, r: Var, cfg: &DecoderConfig) -> Result<Var> {
    let hr = g.hadamard(h, r)?;
    let cat = g.concat_cols(&[h, r, hr])?;
    let batch = g.shape(cat)[0];
    let (height, width) = cfg.image_dims();
    Ok(g.reshape(cat, [batch, 1, height, width])?)
}

/// Raw scores `g(h, r, t)` of each query row against every row of
/// `entities`, shape B×|E|. `h` and `r` are B×D.
#[allow(clippy::too_many_arguments)]
pub fn score_with(
    g: &mut Graph,
    b: &Bindings,
    ids: &DecoderIds,
    cfg: &DecoderConfig,
    h: Var,
    r: Var,
    entities: Var,
    phase: &mut Phase<'_>,
) -> Result<Var> {
    let x = stack_input(g, h, r, cfg)?;
    let x = phase.dropout(g, x, cfg.input_dropout)?;
    let maps = g.conv2d(x, b[ids.kernels])?;
    let maps = activate(g, maps, cfg.conv_activation);
    let maps = phase.dropout(g, maps, cfg.feature_dropout)?;
    let batch = g.shape(maps)[0];
    let flat = g.reshape(maps, [batch, cfg.flat_features()])?;
    let mut hidden = g.matmul(flat, b[ids.w_fc])?;
    hidden = phase.dropout(g, hidden, cfg.hidden_dropout)?;
    if let Some((gamma, beta)) = ids.bn {
        hidden = phase.batch_norm(g, hidden, b[gamma], b[beta], BnSite::Decoder)?;
    }
    let hidden = activate(g, hidden, cfg.activation);
    let mut scores = g.matmul_bt(hidden, entities)?;
    if let Some(bias) = ids.entity_bias {
        scores = g.add(scores, b[bias])?;
    }
    Ok(scores)
}

/// Scores the queries `(heads[i], rels[i], ?)` against all entities.
#[allow(clippy::too_many_arguments)]
pub fn score_all_tails(
    g: &mut Graph,
    b: &Bindings,
    ids: &DecoderIds,
    cfg: &DecoderConfig,
    entities: Var,
    heads: &[usize],
    rels: &[usize],
    phase: &mut Phase<'_>,
) -> Result<Var> {
    let h = g.gather_rows(entities, heads.to_vec())?;
    let r = g.gather_rows(b[ids.relations], rels.to_vec())?;
    score_with(g, b, ids, cfg, h, r, entities, phase)
}

/// Elementwise logistic of raw scores.
pub fn predict_prob(g: &mut Graph, scores: Var) -> Var {
    g.sigmoid(scores)
}
