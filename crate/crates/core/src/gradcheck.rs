//! Finite-difference verification of the full training loss.

use ndiff::{finite_diff_check, CheckOptions, Graph, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::encoder::EdgePlan;
use crate::error::Result;
use crate::kg::KnowledgeGraph;
use crate::model::{GathModel, Phase};
use crate::params::{Bindings, ParamId};
use crate::trainer::QuerySet;

/// Small model for gradient checks: L=2, M=2, D=8, d_k=d_v=4. The wider
/// initializer keeps attention gradients well above the absolute error
/// floor of the relative-error measure, so a wrong VJP anywhere shows up.
pub fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder.init_std = 0.5;
    cfg.encoder.dim = 8;
    cfg.encoder.d_k = 4;
    cfg.encoder.d_v = 4;
    cfg.decoder.reshape = [2, 4];
    cfg.decoder.channels = 2;
    cfg.train.seed = 7;
    cfg
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub non_finite: bool,
}

impl ModelGradReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        !self.non_finite && self.max_rel_err < tolerance
    }
}

/// Compares the analytic gradient of the training loss over every train
/// query against central differences, for each parameter the configured
/// mode reads. Dropout masks are drawn from a fixed seed on every
/// evaluation and batch statistics come from a fresh copy of the buffers.
pub fn check_model_gradients(kg: &KnowledgeGraph, config: &RunConfig, opts: &CheckOptions) -> Result<ModelGradReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let model = GathModel::new(&config.model(), kg.num_entities(), kg.num_relations(), &mut rng)?;
    let plan = EdgePlan::new(&kg.neighborhood_index()?);
    let queries = QuerySet::from_triples(&kg.train_aug);
    let rows: Vec<usize> = (0..queries.len()).collect();
    let labels = queries.labels(&rows, kg.num_entities(), config.train.label_smoothing);

    let used: Vec<ParamId> = model.arch.used_ids();
    let leaves: Vec<ndiff::Tensor> = used.iter().map(|&id| model.params.get(id).clone()).collect();
    let dropout_seed = config.train.seed.wrapping_add(1);

    let f = |g: &mut Graph, vars: &[Var]| -> ndiff::Result<Var> {
        let mut all = Vec::with_capacity(model.params.len());
        for id in model.params.ids() {
            match used.iter().position(|&u| u == id) {
                Some(k) => all.push(vars[k]),
                None => all.push(g.constant(model.params.get(id).clone())),
            }
        }
        let b = Bindings(all);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let mut buffers = model.buffers.clone();
        let mut phase = Phase::Train {
            rng: &mut drop_rng,
            buffers: &mut buffers,
        };
        model
            .arch
            .loss(g, &b, &plan, &queries.heads, &queries.rels, &labels, &mut phase)
            .map_err(|e| match e {
                crate::error::GathError::Tensor(t) => t,
                other => ndiff::Error::NonFinite(other.to_string()),
            })
    };
    let report = finite_diff_check(f, &leaves, opts)?;
    let params = report
        .leaves
        .iter()
        .map(|l| ParamCheck {
            name: model.params.name(used[l.leaf]).to_owned(),
            checked: l.checked,
            max_rel_err: l.max_rel_err,
            analytic: l.analytic,
            numeric: l.numeric,
        })
        .collect();
    Ok(ModelGradReport {
        params,
        max_rel_err: report.max_rel_err,
        non_finite: report.non_finite,
    })
}
