//! The full model: entity table, encoder and decoder parameters, and the
//! batch-normalization buffers that are not trained by gradient.

use ndiff::{BatchNormMode, BatchNormState, Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Mode, ModelConfig};
use crate::decoder::{self, DecoderIds};
use crate::encoder::{self, EdgePlan, EncoderIds};
use crate::error::{GathError, Result};
use crate::params::{Bindings, ParamId, ParamStore};

/// Running statistics of every batch-normalization site.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Buffers {
    pub encoder: Vec<BatchNormState>,
    pub decoder: Option<BatchNormState>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnSite {
    Encoder(usize),
    Decoder,
}

impl Buffers {
    fn site(&self, site: BnSite) -> Option<&BatchNormState> {
        match site {
            BnSite::Encoder(l) => self.encoder.get(l),
            BnSite::Decoder => self.decoder.as_ref(),
        }
    }

    fn site_mut(&mut self, site: BnSite) -> Option<&mut BatchNormState> {
        match site {
            BnSite::Encoder(l) => self.encoder.get_mut(l),
            BnSite::Decoder => self.decoder.as_mut(),
        }
    }
}

/// Training draws dropout masks and updates running statistics; evaluation
/// is deterministic.
pub enum Phase<'a> {
    Train {
        rng: &'a mut ChaCha8Rng,
        buffers: &'a mut Buffers,
    },
    Eval {
        buffers: &'a Buffers,
    },
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train { .. })
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var, p: f64) -> Result<Var> {
        match self {
            Phase::Train { rng, .. } => Ok(g.dropout(x, p, true, &mut **rng)?),
            Phase::Eval { .. } => Ok(x),
        }
    }

    pub fn batch_norm(&mut self, g: &mut Graph, x: Var, gamma: Var, beta: Var, site: BnSite) -> Result<Var> {
        let missing = || GathError::Numeric(format!("no batch-norm buffer for {site:?}"));
        let mode = match self {
            Phase::Train { buffers, .. } => BatchNormMode::Train(buffers.site_mut(site).ok_or_else(missing)?),
            Phase::Eval { buffers } => BatchNormMode::Eval(buffers.site(site).ok_or_else(missing)?),
        };
        Ok(g.batch_norm(x, gamma, beta, mode)?)
    }
}

/// Parameter layout and forward computation, independent of values.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub config: ModelConfig,
    pub num_entities: usize,
    pub num_relations: usize,
    pub entities: ParamId,
    pub encoder: EncoderIds,
    pub decoder: DecoderIds,
}

impl Architecture {
    /// Final entity embeddings: the encoder output, or the input table in
    /// `decoder_only` mode.
    pub fn embed(&self, g: &mut Graph, b: &Bindings, plan: &EdgePlan, phase: &mut Phase<'_>) -> Result<Var> {
        let h0 = b[self.entities];
        if !self.config.mode.uses_encoder() {
            return Ok(h0);
        }
        if plan.num_entities() != self.num_entities {
            return Err(GathError::Data(format!(
                "edge plan covers {} entities, model has {}",
                plan.num_entities(),
                self.num_entities
            )));
        }
        encoder::encode(
            g,
            b,
            &self.encoder,
            h0,
            plan,
            &self.config.encoder,
            self.config.mode,
            phase,
        )
    }

    /// Raw scores of each `(heads[i], rels[i])` against every entity.
    pub fn scores(
        &self,
        g: &mut Graph,
        b: &Bindings,
        entities: Var,
        heads: &[usize],
        rels: &[usize],
        phase: &mut Phase<'_>,
    ) -> Result<Var> {
        decoder::score_all_tails(g, b, &self.decoder, &self.config.decoder, entities, heads, rels, phase)
    }

    /// Mean 1-vs-all binary cross-entropy of a batch of queries.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        b: &Bindings,
        plan: &EdgePlan,
        heads: &[usize],
        rels: &[usize],
        labels: &Tensor,
        phase: &mut Phase<'_>,
    ) -> Result<Var> {
        let ent = self.embed(g, b, plan, phase)?;
        let scores = self.scores(g, b, ent, heads, rels, phase)?;
        let probs = decoder::predict_prob(g, scores);
        g.bce_mean(probs, labels).map_err(|e| match e {
            ndiff::Error::NonFinite(what) => GathError::Numeric(format!("non-finite loss input: {what}")),
            other => other.into(),
        })
    }

    /// Parameters the forward pass reads in this mode.
    pub fn used_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.entities];
        if self.config.mode.uses_encoder() {
            let skip = if self.config.mode.entity_specific() {
                Vec::new()
            } else {
                self.encoder.entity_specific_ids()
            };
            ids.extend(self.encoder.all_ids().into_iter().filter(|id| !skip.contains(id)));
        }
        ids.extend(self.decoder.all_ids());
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GathModel {
    pub arch: Architecture,
    pub params: ParamStore,
    pub buffers: Buffers,
}

impl GathModel {
    /// Gaussian initialization of every table and matrix; β and batch-norm
    /// scales start at one, batch-norm shifts at zero.
    pub fn new<R: Rng + ?Sized>(
        config: &ModelConfig,
        num_entities: usize,
        num_relations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_entities == 0 || num_relations == 0 {
            return Err(GathError::Data("graph has no entities or relations".into()));
        }
        let e = &config.encoder;
        let mut params = ParamStore::new();
        let entities = params.add("entities", Tensor::randn([num_entities, e.dim], e.init_std, rng));
        let encoder = EncoderIds::init(&mut params, e, config.mode, num_entities, num_relations, rng);
        let decoder = DecoderIds::init(
            &mut params,
            &config.decoder,
            e.dim,
            num_entities,
            num_relations,
            e.init_std,
            rng,
        );
        let buffers = Buffers {
            encoder: if e.batch_norm {
                (0..e.layers).map(|_| BatchNormState::new(e.dim)).collect()
            } else {
                Vec::new()
            },
            decoder: config.decoder.batch_norm.then(|| BatchNormState::new(e.dim)),
        };
        Ok(Self {
            arch: Architecture {
                config: config.clone(),
                num_entities,
                num_relations,
                entities,
                encoder,
                decoder,
            },
            params,
            buffers,
        })
    }

    pub fn mode(&self) -> Mode {
        self.arch.config.mode
    }

    pub fn config_hash(&self) -> String {
        self.arch.config.hash(self.arch.num_entities, self.arch.num_relations)
    }

    /// Entity embeddings in evaluation mode.
    pub fn entity_embeddings(&self, plan: &EdgePlan) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let mut phase = Phase::Eval { buffers: &self.buffers };
        let ent = self.arch.embed(&mut g, &b, plan, &mut phase)?;
        Ok(g.value(ent).clone())
    }

    /// Evaluation-mode raw scores for a batch of queries given precomputed
    /// entity embeddings. Only the decoder parameters are bound.
    pub fn score_queries(&self, entities: &Tensor, heads: &[usize], rels: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut vars: Vec<Var> = Vec::with_capacity(self.params.len());
        let decoder_ids = self.arch.decoder.all_ids();
        let placeholder = g.constant(Tensor::scalar(0.0));
        for id in self.params.ids() {
            if decoder_ids.contains(&id) {
                vars.push(g.constant(self.params.get(id).clone()));
            } else {
                vars.push(placeholder);
            }
        }
        let b = Bindings(vars);
        let ent = g.constant(entities.clone());
        let mut phase = Phase::Eval { buffers: &self.buffers };
        let scores = self.arch.scores(&mut g, &b, ent, heads, rels, &mut phase)?;
        Ok(g.value(scores).clone())
    }

    /// Relation-dependent parameter count of every encoder layer.
    pub fn relation_feature_params(&self) -> Vec<usize> {
        (0..self.arch.encoder.layers.len())
            .map(|l| self.arch.encoder.relation_feature_params(&self.params, l))
            .collect()
    }
}
