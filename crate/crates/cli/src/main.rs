use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gath::accounting::{group_thousands, param_report};
use gath::checkpoint::Checkpoint;
use gath::config::parse_assignment;
use gath::gradcheck::{check_model_gradients, toy_config};
use gath::kg::synthetic::{generate, SyntheticSpec};
use gath::kg::{bucket_degrees, Bucket};
use gath::{run, GathError, KnowledgeGraph, Mode, Result, RunConfig, Split};
use ndiff::{CheckOptions, OpKind};

#[derive(Parser)]
#[command(name = "gath", version, about = "Graph-attention knowledge-graph completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset directory and export its vocabularies and degree statistics.
    Prepare {
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to the dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic dataset (train/valid/test.txt).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        entities: usize,
        #[arg(long, default_value_t = 5)]
        relations: usize,
        #[arg(long, default_value_t = 300)]
        triples: usize,
        #[arg(long, default_value_t = 5)]
        groups: usize,
        /// Zipf exponent of tail popularity within a group; 0 is uniform.
        #[arg(long, default_value_t = 1.5)]
        skew: f64,
        #[arg(long, default_value_t = 0.1)]
        valid_fraction: f64,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Train a model, writing config.toml, train.log and checkpoint.bin to --out.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint with the same model configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Filtered ranking evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the training loss.
    CheckGrad {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Check at most this many entries per parameter.
        #[arg(long)]
        max_entries: Option<usize>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Parameter counts per layer and the relation-feature comparison.
    Params {
        #[command(flatten)]
        run: RunArgs,
        /// Relation table rows (raw plus reverse); overrides --dataset.
        #[arg(long)]
        relations: Option<usize>,
        #[arg(long)]
        entities: Option<usize>,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    device: Option<String>,
    /// Dotted config override, e.g. --set encoder.layers=3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut o = Vec::new();
        let quote = |p: &PathBuf| format!("{:?}", p.display().to_string());
        if let Some(d) = &self.dataset {
            o.push(("dataset".into(), quote(d)));
        }
        if let Some(d) = &self.out {
            o.push(("out".into(), quote(d)));
        }
        if let Some(s) = self.seed {
            o.push(("train.seed".into(), s.to_string()));
        }
        if let Some(m) = &self.mode {
            let mode: Mode = m.parse()?;
            o.push(("train.mode".into(), format!("{:?}", mode.name())));
        }
        if let Some(e) = self.epochs {
            o.push(("train.epochs".into(), e.to_string()));
        }
        if let Some(d) = &self.device {
            o.push(("device".into(), format!("{d:?}")));
        }
        for s in &self.set {
            o.push(parse_assignment(s)?);
        }
        Ok(o)
    }

    fn config(&self, base: &RunConfig) -> Result<RunConfig> {
        RunConfig::load_over(base, self.config.as_deref(), &self.overrides()?)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GATH_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Prepare { dataset, out } => prepare(&dataset, out.as_ref().unwrap_or(&dataset)),
        Command::Generate {
            out,
            entities,
            relations,
            triples,
            groups,
            skew,
            valid_fraction,
            test_fraction,
            seed,
        } => {
            let spec = SyntheticSpec {
                entities,
                relations,
                triples,
                groups,
                skew,
                valid_fraction,
                test_fraction,
                seed,
            };
            let splits = generate(&spec)?;
            splits.write_dir(&out)?;
            println!(
                "wrote {} train / {} valid / {} test triples to {}",
                splits.train.len(),
                splits.valid.len(),
                splits.test.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { run, resume } => train(&run, resume),
        Command::Eval {
            checkpoint,
            dataset,
            split,
            out,
        } => {
            let split: Split = split.parse()?;
            let kg = KnowledgeGraph::load(&dataset)?;
            let out = out.unwrap_or_else(|| checkpoint.parent().map(PathBuf::from).unwrap_or_default());
            let report = run::eval_checkpoint(&checkpoint, &kg, split, &out)?;
            print!("{}", report.render());
            println!("reports written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::CheckGrad {
            run,
            tolerance,
            max_entries,
            inject_fault,
        } => check_grad(&run, tolerance, max_entries, inject_fault),
        Command::Params {
            run,
            relations,
            entities,
        } => params(&run, relations, entities),
    }
}

fn prepare(dataset: &std::path::Path, out: &std::path::Path) -> Result<ExitCode> {
    let kg = KnowledgeGraph::load(dataset)?;
    std::fs::create_dir_all(out).map_err(|e| GathError::io(out, e))?;
    let (e, r) = kg.export_vocab(out)?;
    let buckets = bucket_degrees(&kg);
    let count = |v: &[Bucket], b: Bucket| v.iter().filter(|&&x| x == b).count();
    println!(
        "entities={} raw_relations={} relations={} train={} valid={} test={} train_aug={}",
        kg.num_entities(),
        kg.vocab.num_raw_relations(),
        kg.num_relations(),
        kg.train.len(),
        kg.valid.len(),
        kg.test.len(),
        kg.train_aug.len()
    );
    for b in Bucket::ALL {
        println!(
            "{:<8} nodes={} relations={}",
            b.name(),
            count(&buckets.node_bucket, b),
            count(&buckets.relation_bucket, b)
        );
    }
    println!("vocabularies: {} {}", e.display(), r.display());
    Ok(ExitCode::SUCCESS)
}

fn train(args: &RunArgs, resume: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = args.config(&RunConfig::default())?;
    let kg = run::load_dataset(&cfg)?;
    let ck = resume.map(|p| Checkpoint::load(&p)).transpose()?;
    let outcome = run::train(&cfg, &kg, ck)?;
    if let Some(last) = outcome.epochs.last() {
        println!("{}", last.log_line());
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    if !kg.valid.is_empty() {
        let ck = Checkpoint::load(&outcome.checkpoint)?;
        let report = run::evaluate_model(&kg, &ck.model, Split::Valid, cfg.train.eval_batch_size)?;
        print!("{}", report.render());
    }
    Ok(ExitCode::SUCCESS)
}

fn check_grad(args: &RunArgs, tolerance: f64, max_entries: Option<usize>, fault: Option<String>) -> Result<ExitCode> {
    let cfg = args.config(&toy_config())?;
    let kg = match &cfg.dataset {
        Some(_) => run::load_dataset(&cfg)?,
        None => generate(&SyntheticSpec::tiny(8, 3, 16, cfg.train.seed))?.into_graph()?,
    };
    let fault = fault
        .map(|s| -> Result<(OpKind, f64)> {
            let (op, factor) = s.split_once(':').unwrap_or((&s, "1.5"));
            let op: OpKind = op.parse().map_err(GathError::Config)?;
            let factor: f64 = factor
                .parse()
                .map_err(|_| GathError::Config(format!("bad fault factor `{factor}`")))?;
            Ok((op, factor))
        })
        .transpose()?;
    let opts = CheckOptions {
        max_entries_per_leaf: max_entries,
        fault,
        ..CheckOptions::default()
    };
    let report = check_model_gradients(&kg, &cfg, &opts)?;
    println!(
        "mode={} entities={} relations={} parameters={}",
        cfg.train.mode,
        kg.num_entities(),
        kg.num_relations(),
        report.params.len()
    );
    for p in &report.params {
        println!(
            "{:<28} checked={:<5} max_rel_err={:.3e}",
            p.name, p.checked, p.max_rel_err
        );
    }
    println!("max_rel_err={:.3e} tolerance={tolerance:e}", report.max_rel_err);
    if report.passed(tolerance) {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL");
        Err(GathError::Numeric(format!(
            "gradient check failed: max relative error {:.3e} >= {tolerance:e}",
            report.max_rel_err
        )))
    }
}

fn params(args: &RunArgs, relations: Option<usize>, entities: Option<usize>) -> Result<ExitCode> {
    let cfg = args.config(&RunConfig::default())?;
    let (ne, nr) = match (&cfg.dataset, relations) {
        (_, Some(nr)) => (entities, nr),
        (Some(_), None) => {
            let kg = run::load_dataset(&cfg)?;
            (Some(entities.unwrap_or(kg.num_entities())), kg.num_relations())
        }
        (None, None) => {
            return Err(GathError::Config("params needs --relations or --dataset".into()));
        }
    };
    let r = param_report(&cfg, ne.unwrap_or(1), nr)?;
    let g = |x: usize| group_thousands(x as u64);
    println!(
        "mode={} relations={} dim={} proj={} (heads {} x d_k {})",
        cfg.train.mode, r.num_relations, r.dim, r.proj, cfg.encoder.heads, cfg.encoder.d_k
    );
    for l in &r.layers {
        println!(
            "layer {}: relation_features={} entity_attention={} values_output={} residual={} batch_norm={} total={}",
            l.layer,
            g(l.relation_features),
            g(l.entity_attention),
            g(l.values_and_output),
            g(l.residual),
            g(l.batch_norm),
            g(l.total)
        );
    }
    println!("decoder: {}", g(r.decoder));
    match ne {
        Some(ne) => {
            println!("entity table ({ne} entities): {}", g(r.entity_table));
            println!("total: {}", g(r.total));
        }
        None => println!("entity table and total: pass --entities or --dataset"),
    }
    println!(
        "relation features per layer: {} (nD+2DF) vs {} (2nDF) with n={} D={} F={}",
        group_thousands(r.shared_relation_features),
        group_thousands(r.per_relation_matrices),
        r.num_relations,
        r.dim,
        r.proj
    );
    Ok(ExitCode::SUCCESS)
}
