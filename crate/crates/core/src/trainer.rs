//! Epoch loop over 1-vs-all query batches.

use std::collections::BTreeMap;
use std::time::Instant;

use ndiff::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::encoder::EdgePlan;
use crate::error::{GathError, Result};
use crate::kg::{KnowledgeGraph, Triple};
use crate::model::{GathModel, Phase};
use crate::optim::{AdamW, OptimizerState};

/// `lr0 · decay^epoch`.
pub fn lr_at_epoch(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Distinct `(head, rel)` queries of a triple list with their true tails.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub heads: Vec<usize>,
    pub rels: Vec<usize>,
    pub tails: Vec<Vec<usize>>,
}

impl QuerySet {
    pub fn from_triples(triples: &[Triple]) -> Self {
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for t in triples {
            groups.entry((t.head, t.rel)).or_default().push(t.tail);
        }
        let mut set = Self {
            heads: Vec::with_capacity(groups.len()),
            rels: Vec::with_capacity(groups.len()),
            tails: Vec::with_capacity(groups.len()),
        };
        for ((h, r), mut tails) in groups {
            tails.sort_unstable();
            tails.dedup();
            set.heads.push(h);
            set.rels.push(r);
            set.tails.push(tails);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Multi-hot rows for the selected queries, optionally smoothed towards
    /// the uniform distribution.
    pub fn labels(&self, rows: &[usize], num_entities: usize, smoothing: f64) -> Tensor {
        let mut data = vec![0.0; rows.len() * num_entities];
        for (b, &q) in rows.iter().enumerate() {
            for &t in &self.tails[q] {
                data[b * num_entities + t] = 1.0;
            }
        }
        if smoothing > 0.0 {
            let floor = smoothing / num_entities as f64;
            for y in &mut data {
                *y = (1.0 - smoothing) * *y + floor;
            }
        }
        Tensor::new([rows.len(), num_entities], data).expect("label shape")
    }
}

/// Consecutive batches of `order`. A trailing batch of one query is merged
/// into the previous batch so batch statistics are never taken over a
/// single row.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = order.len() - 1 - out.last().unwrap().len();
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based index of the finished epoch.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub seconds: f64,
}

impl EpochStats {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} lr={:.6e} loss={:.8} time_s={:.3}",
            self.epoch, self.lr, self.loss, self.seconds
        )
    }
}

/// Model, optimizer and RNG of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: GathModel,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
    /// Number of completed epochs.
    pub epoch: usize,
    plan: EdgePlan,
    queries: QuerySet,
}

impl Trainer {
    /// Fresh run: the seed drives initialization, shuffling and dropout.
    pub fn new(config: &RunConfig, kg: &KnowledgeGraph) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let model = GathModel::new(&config.model(), kg.num_entities(), kg.num_relations(), &mut rng)?;
        let optimizer = OptimizerState::new(&model.params);
        Self::assemble(config.clone(), kg, model, optimizer, rng, 0)
    }

    /// Continues from saved state.
    pub fn assemble(
        config: RunConfig,
        kg: &KnowledgeGraph,
        model: GathModel,
        optimizer: OptimizerState,
        rng: ChaCha8Rng,
        epoch: usize,
    ) -> Result<Self> {
        if model.arch.num_entities != kg.num_entities() || model.arch.num_relations != kg.num_relations() {
            return Err(GathError::Data(format!(
                "model expects {} entities / {} relations, graph has {} / {}",
                model.arch.num_entities,
                model.arch.num_relations,
                kg.num_entities(),
                kg.num_relations()
            )));
        }
        let plan = EdgePlan::new(&kg.neighborhood_index()?);
        let queries = QuerySet::from_triples(&kg.train_aug);
        Ok(Self {
            config,
            model,
            optimizer,
            rng,
            epoch,
            plan,
            queries,
        })
    }

    pub fn plan(&self) -> &EdgePlan {
        &self.plan
    }

    pub fn queries(&self) -> &QuerySet {
        &self.queries
    }

    pub fn current_lr(&self) -> f64 {
        lr_at_epoch(self.config.train.lr0, self.config.train.lr_decay, self.epoch)
    }

    /// One pass over the shuffled query groups; returns the mean batch loss.
    pub fn train_epoch(&mut self) -> Result<EpochStats> {
        let start = Instant::now();
        let lr = self.current_lr();
        let hp = AdamW::from(&self.config.train);
        let t = &self.config.train;
        let mut order: Vec<usize> = (0..self.queries.len()).collect();
        order.shuffle(&mut self.rng);
        let num_entities = self.model.arch.num_entities;
        let mut total = 0.0;
        let batch_list = batches(&order, t.batch_size);
        for (bi, rows) in batch_list.iter().enumerate() {
            let heads: Vec<usize> = rows.iter().map(|&q| self.queries.heads[q]).collect();
            let rels: Vec<usize> = rows.iter().map(|&q| self.queries.rels[q]).collect();
            let labels = self.queries.labels(rows, num_entities, t.label_smoothing);
            let mut g = Graph::new();
            let b = self.model.params.bind(&mut g, true);
            let mut phase = Phase::Train {
                rng: &mut self.rng,
                buffers: &mut self.model.buffers,
            };
            let loss = self
                .model
                .arch
                .loss(&mut g, &b, &self.plan, &heads, &rels, &labels, &mut phase)
                .map_err(|e| annotate(e, self.epoch + 1, bi))?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(GathError::Numeric(format!(
                    "epoch {} batch {bi}: loss is {value}",
                    self.epoch + 1
                )));
            }
            total += value;
            let mut grads = g.backward(loss)?;
            let per_param: Vec<Option<Vec<f64>>> = b.0.iter().map(|&v| grads.take(v)).collect();
            if let Some(i) = per_param
                .iter()
                .position(|gr| gr.as_ref().is_some_and(|gr| gr.iter().any(|x| !x.is_finite())))
            {
                return Err(GathError::Numeric(format!(
                    "epoch {} batch {bi}: non-finite gradient for {}",
                    self.epoch + 1,
                    self.model.params.name(crate::params::ParamId(i))
                )));
            }
            self.optimizer.step(&mut self.model.params, &per_param, lr, &hp);
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            lr,
            loss: if batch_list.is_empty() {
                0.0
            } else {
                total / batch_list.len() as f64
            },
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

fn annotate(e: GathError, epoch: usize, batch: usize) -> GathError {
    match e {
        GathError::Numeric(msg) => GathError::Numeric(format!("epoch {epoch} batch {batch}: {msg}")),
        other => other,
    }
}
