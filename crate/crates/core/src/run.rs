//! End-to-end training and evaluation runs writing to an output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::encoder::EdgePlan;
use crate::error::{GathError, Result};
use crate::evaluator::{evaluate, write_reports, FilterSet, Metrics, ModelScorer, RankingReport};
use crate::kg::{bucket_degrees, KnowledgeGraph, Split};
use crate::model::GathModel;
use crate::trainer::{EpochStats, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train.log";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    /// `(epoch, metrics)` of each validation pass.
    pub validations: Vec<(usize, Metrics)>,
    pub checkpoint: PathBuf,
    pub stopped_early: bool,
}

/// Loads the dataset named by the configuration.
pub fn load_dataset(config: &RunConfig) -> Result<KnowledgeGraph> {
    let dir = config
        .dataset
        .as_deref()
        .ok_or_else(|| GathError::Config("no dataset directory given".into()))?;
    KnowledgeGraph::load(dir)
}

/// Ranks a split with an evaluation-mode model.
pub fn evaluate_model(
    kg: &KnowledgeGraph,
    model: &GathModel,
    split: Split,
    batch_size: usize,
) -> Result<RankingReport> {
    let plan = EdgePlan::new(&kg.neighborhood_index()?);
    let scorer = ModelScorer::new(model, &plan)?;
    let filter = FilterSet::build(kg);
    let buckets = bucket_degrees(kg);
    evaluate(kg, &scorer, split, &filter, &buckets, batch_size)
}

/// Trains for `config.train.epochs` epochs (counting any already completed
/// by `resume`), writing the effective config, a key=value epoch log and a
/// checkpoint after every epoch into `config.out`.
pub fn train(config: &RunConfig, kg: &KnowledgeGraph, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    let out = &config.out;
    fs::create_dir_all(out).map_err(|e| GathError::io(out, e))?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, config.to_toml()).map_err(|e| GathError::io(&config_path, e))?;

    let mut trainer = match resume {
        Some(ck) => {
            ck.check_hash(&config.model().hash(kg.num_entities(), kg.num_relations()))?;
            let mut t = ck.into_trainer(kg, config)?;
            t.config = config.clone();
            t
        }
        None => Trainer::new(config, kg)?,
    };
    let log_path = out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| GathError::io(&log_path, e))?);
    let io = |e| GathError::io(&log_path, e);
    writeln!(
        log,
        "# mode={} seed={} entities={} relations={} train={} start_epoch={}",
        config.train.mode,
        config.train.seed,
        kg.num_entities(),
        kg.num_relations(),
        kg.train.len(),
        trainer.epoch
    )
    .map_err(io)?;

    let ckpt_path = out.join(CHECKPOINT_FILE);
    let t = &config.train;
    let mut outcome = TrainOutcome {
        epochs: Vec::new(),
        validations: Vec::new(),
        checkpoint: ckpt_path.clone(),
        stopped_early: false,
    };
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    while trainer.epoch < t.epochs {
        let stats = trainer.train_epoch()?;
        writeln!(log, "{}", stats.log_line()).map_err(io)?;
        log.flush().map_err(io)?;
        info!("{}", stats.log_line());
        Checkpoint::from_trainer(&trainer).save(&ckpt_path)?;
        let epoch = stats.epoch;
        outcome.epochs.push(stats);
        if t.valid_every > 0 && epoch % t.valid_every == 0 && !kg.valid.is_empty() {
            let report = evaluate_model(kg, &trainer.model, Split::Valid, t.eval_batch_size)?;
            let m = report.metrics;
            writeln!(
                log,
                "valid epoch={epoch} mrr={:.6} mr={:.3} hits10={:.6}",
                m.mrr, m.mr, m.hits10
            )
            .map_err(io)?;
            info!("valid epoch={epoch} mrr={:.4}", m.mrr);
            outcome.validations.push((epoch, m));
            if m.mrr > best {
                best = m.mrr;
                stale = 0;
            } else {
                stale += 1;
                if t.patience > 0 && stale >= t.patience {
                    writeln!(log, "# stopped: no validation improvement for {stale} checks").map_err(io)?;
                    outcome.stopped_early = true;
                    break;
                }
            }
        }
    }
    if outcome.epochs.is_empty() {
        Checkpoint::from_trainer(&trainer).save(&ckpt_path)?;
    }
    log.flush().map_err(io)?;
    Ok(outcome)
}

/// Evaluates a saved checkpoint on `split` and writes CSV and JSON reports
/// into `out`.
pub fn eval_checkpoint(checkpoint: &Path, kg: &KnowledgeGraph, split: Split, out: &Path) -> Result<RankingReport> {
    let ck = Checkpoint::load(checkpoint)?;
    ck.check_hash(&ck.config.model().hash(kg.num_entities(), kg.num_relations()))?;
    let report = evaluate_model(kg, &ck.model, split, ck.config.train.eval_batch_size)?;
    write_reports(&report, out)?;
    Ok(report)
}
