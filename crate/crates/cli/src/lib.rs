//! The `eiarag` command line. Every subcommand reads the TOML configuration
//! (flag, then `EIARAG_CONFIG`, then defaults), applies `--set key=value`
//! overrides, and writes its artifacts into the output directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use eiarag_client::{ClientError, ServiceClient};
use eiarag_core::classifier::{init_model, train};
use eiarag_core::config::{build_environment, build_router, Artifacts, Config, Environment, Policy};
use eiarag_core::dataset::{load_query_set, save_query_set, split_query_set_with, QuerySet};
use eiarag_core::embedding::{read_embedding_cache, sentence_embedding, write_embedding_cache, SentenceEmbedding};
use eiarag_core::eval::{evaluate, sweep_layers, write_summary_csv, write_sweep_csv, EvalReport, SweepConfig};
use eiarag_core::labeler::{
    annotate, build_labeled_set, correctness_records, load_labeled_set, read_annotations, save_labeled_set,
    write_label_records,
};
use eiarag_core::retrieval::save_corpus;
use eiarag_core::routers::{fit_frequency_thresholds, route};
use eiarag_core::viz::{emit_viz, write_viz_csv};
use eiarag_core::wire::RouteResponse;
use eiarag_core::{Error, Result};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "eiarag", version, about = "Embedding-informed adaptive retrieval pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file (default: $EIARAG_CONFIG, else built-in defaults).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set model.threshold=0.6`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Do not print result summaries to stdout.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate the query set, split it, and build the BM25 index.
    Ingest {
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long)]
        stratified: bool,
    },
    /// Compute sentence embeddings for a dataset.
    Embed {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        layer: Option<u32>,
    },
    /// Label the training split and annotate the test split.
    Label {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        skip_annotations: bool,
    },
    /// Train the classifier and fit frequency thresholds.
    Train {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate routing policies and write one report per policy.
    Eval {
        #[arg(long, value_delimiter = ',')]
        policy: Vec<Policy>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train and evaluate one classifier per embedding layer.
    SweepLayers {
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<u32>,
    },
    /// Project sentence embeddings to 2D.
    Viz {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        layer: Option<u32>,
    },
    /// Route questions locally or through a running service.
    Route {
        #[arg(required = true)]
        questions: Vec<String>,
        #[arg(long)]
        policy: Option<Policy>,
        /// Base URL of a running service.
        #[arg(long)]
        server: Option<String>,
    },
    /// Run the HTTP routing service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Client(#[from] ClientError),
}

impl CliError {
    pub fn kind(&self) -> &str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Client(e) => e.kind(),
        }
    }
}

/// One machine-parsable line: `error: kind=<kind> message="<escaped>"`.
pub fn error_line(e: &CliError) -> String {
    format!("error: kind={} message={}", e.kind(), json!(e.to_string()))
}

fn load_config(g: &GlobalArgs) -> Result<Config> {
    let mut cfg = Config::resolve(g.config.as_deref())?;
    for o in &g.overrides {
        cfg.set(o)?;
    }
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    Ok(cfg)
}

/// Prints one JSON summary line per result unless quiet.
#[derive(Debug, Clone, Copy)]
struct Printer {
    quiet: bool,
}

impl Printer {
    fn emit(self, value: serde_json::Value) {
        if !self.quiet {
            println!("{value}");
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn load_optional(path: &Path) -> Result<Option<QuerySet>> {
    if path.exists() {
        load_query_set(path).map(Some)
    } else {
        Ok(None)
    }
}

fn require(path: &Path, hint: &str) -> Result<QuerySet> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} not found; run `{hint}` first",
            path.display()
        )));
    }
    load_query_set(path)
}

fn all_queries(env: &Environment, a: &Artifacts) -> Result<QuerySet> {
    if let Some(q) = &env.queries {
        return Ok(q.clone());
    }
    let train = require(&a.train(), "eiarag ingest")?;
    let test = require(&a.test(), "eiarag ingest")?;
    QuerySet::new("all", train.records().iter().chain(test.records()).cloned().collect())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli.global)?;
    let a = cfg.artifacts();
    let out = Printer {
        quiet: cli.global.quiet,
    };
    match cli.command {
        Command::Ingest {
            queries,
            corpus,
            train_fraction,
            split_seed,
            stratified,
        } => {
            if let Some(q) = queries {
                cfg.data.queries = Some(q);
            }
            if let Some(c) = corpus {
                cfg.index.corpus = Some(c);
            }
            if let Some(f) = train_fraction {
                cfg.data.train_fraction = f;
            }
            if let Some(s) = split_seed {
                cfg.data.split_seed = s;
            }
            if stratified {
                cfg.data.split = eiarag_core::dataset::SplitStrategy::StratifiedByRelation;
            }
            let env = build_environment(&cfg)?;
            let queries = env
                .queries
                .clone()
                .ok_or_else(|| Error::Config("no query set: set data.queries or use a stub world".into()))?;
            let (train_set, test_set, report) =
                split_query_set_with(&queries, cfg.data.train_fraction, cfg.data.split_seed, cfg.data.split)?;
            save_query_set(&train_set, a.train())?;
            save_query_set(&test_set, a.test())?;
            write_json(&a.split(), &report)?;
            save_corpus(env.backends.index.passages(), a.corpus())?;
            env.backends.index.save(a.index())?;
            out.emit(json!({
                "command": "ingest",
                "queries": queries.len(),
                "train": report.train,
                "test": report.test,
                "documents": env.backends.index.len(),
            }));
        }
        Command::Embed { dataset, layer } => {
            let env = build_environment(&cfg)?;
            let set = match dataset {
                Some(p) => load_query_set(p)?,
                None => all_queries(&env, &a)?,
            };
            let layer = layer.unwrap_or(cfg.model.layer);
            let embeddings = embed_all(&env, &set, layer, cfg.model.include_bos)?;
            write_embedding_cache(&embeddings, a.embeddings())?;
            out.emit(json!({"command": "embed", "count": embeddings.len(), "layer": layer}));
        }
        Command::Label {
            train: train_path,
            test: test_path,
            skip_annotations,
        } => {
            let env = build_environment(&cfg)?;
            let train_set = require(&train_path.unwrap_or_else(|| a.train()), "eiarag ingest")?;
            let label_cfg = cfg.label_config(Some(&train_set));
            let (labeled, summary) = build_labeled_set(&train_set, &env.backends, &label_cfg)?;
            save_labeled_set(&labeled, a.labels(), a.label_embeddings())?;
            let mut annotated = None;
            if !skip_annotations {
                let test_set = require(&test_path.unwrap_or_else(|| a.test()), "eiarag ingest")?;
                let pairs = annotate(
                    &test_set,
                    &env.backends,
                    &label_cfg.qa,
                    label_cfg.workers,
                    label_cfg.strict,
                )?;
                write_label_records(&correctness_records(&pairs), a.annotations())?;
                annotated = Some(pairs.len());
            }
            out.emit(json!({
                "command": "label",
                "positive": summary.positive,
                "negative": summary.negative,
                "skipped": summary.skipped,
                "annotated": annotated,
            }));
        }
        Command::Train { seed } => {
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let labeled = load_labeled_set(a.labels(), a.label_embeddings())?;
            let first = labeled
                .examples()
                .first()
                .ok_or_else(|| Error::Validation("labeled set is empty".into()))?;
            let (dim, layer) = (first.embedding.dim(), first.embedding.layer);
            let init = init_model(dim, cfg.model.hidden1, cfg.model.hidden2, cfg.train.seed)?;
            let (mut model, log) = train(&init, &labeled, &cfg.train)?;
            model.meta.layer = layer;
            model.save(a.model())?;
            write_json(&a.training_log(), &log)?;

            let train_set = load_optional(&a.train())?;
            let thresholds = match train_set {
                Some(t) => match fit_frequency_thresholds(&t, &read_annotations(a.labels())?) {
                    Ok(th) => {
                        th.save(a.thresholds())?;
                        true
                    }
                    Err(e) => {
                        tracing::warn!(error = %e, "skipping frequency thresholds");
                        false
                    }
                },
                None => false,
            };
            out.emit(json!({
                "command": "train",
                "best_epoch": log.best_epoch,
                "val_accuracy": log.best_val_accuracy,
                "thresholds": thresholds,
            }));
        }
        Command::Eval { policy, dataset } => {
            let env = build_environment(&cfg)?;
            let test_set = require(&dataset.unwrap_or_else(|| a.test()), "eiarag ingest")?;
            let train_set = load_optional(&a.train())?;
            let eval_cfg = cfg.eval_config(train_set.as_ref());
            let policies = if policy.is_empty() {
                vec![cfg.routing.policy]
            } else {
                policy
            };
            let clock = cfg.clock();
            let mut reports: Vec<EvalReport> = Vec::new();
            for p in policies {
                let router = build_router(p, &cfg, &env.backends, clock.clone())?;
                let report = evaluate(router.as_ref(), &test_set, &env.backends, &eval_cfg, clock.as_ref())?;
                report.save(a.report(p))?;
                out.emit(serde_json::to_value(&report).expect("serializable"));
                reports.push(report);
            }
            write_summary_csv(&reports, a.summary())?;
        }
        Command::SweepLayers { layers } => {
            let env = build_environment(&cfg)?;
            let train_set = require(&a.train(), "eiarag ingest")?;
            let test_set = require(&a.test(), "eiarag ingest")?;
            let sweep_cfg = SweepConfig {
                label: cfg.label_config(Some(&train_set)),
                train: cfg.train.clone(),
                hidden: (cfg.model.hidden1, cfg.model.hidden2),
                threshold: cfg.model.threshold,
                eval: cfg.eval_config(Some(&train_set)),
            };
            let rows = sweep_layers(
                &layers,
                &train_set,
                &test_set,
                &env.backends,
                &sweep_cfg,
                cfg.clock().as_ref(),
            )?;
            write_sweep_csv(&rows, a.sweep())?;
            out.emit(json!({"command": "sweep-layers", "rows": rows}));
        }
        Command::Viz { dataset, layer } => {
            let env = build_environment(&cfg)?;
            let set = match dataset {
                Some(p) => load_query_set(p)?,
                None => all_queries(&env, &a)?,
            };
            let layer = layer.unwrap_or(cfg.model.layer);
            let cached: Vec<SentenceEmbedding> = if a.embeddings().exists() {
                read_embedding_cache(a.embeddings())?
                    .into_iter()
                    .filter(|e| e.layer == layer && set.get(&e.query_id).is_some())
                    .collect()
            } else {
                Vec::new()
            };
            let embeddings = if cached.len() == set.len() {
                cached
            } else {
                embed_all(&env, &set, layer, cfg.model.include_bos)?
            };
            let rows = emit_viz(&embeddings, &set)?;
            write_viz_csv(&rows, a.viz())?;
            out.emit(json!({"command": "viz", "rows": rows.len(), "layer": layer}));
        }
        Command::Route {
            questions,
            policy,
            server,
        } => match server {
            Some(url) => route_remote(&url, &questions, out)?,
            None => {
                let env = build_environment(&cfg)?;
                let clock = cfg.clock();
                let router = build_router(policy.unwrap_or(cfg.routing.policy), &cfg, &env.backends, clock.clone())?;
                for (i, q) in questions.iter().enumerate() {
                    let record = env
                        .queries
                        .as_ref()
                        .and_then(|set| set.iter().find(|r| r.question == *q).cloned())
                        .unwrap_or_else(|| {
                            eiarag_core::dataset::QueryRecord::new(format!("cli-{i}"), q.clone(), Vec::new())
                        });
                    let d = route(router.as_ref(), &record, clock.as_ref())?;
                    out.emit(
                        serde_json::to_value(RouteResponse {
                            retrieve: d.retrieve,
                            score: d.score,
                            policy: d.policy,
                            decision_ms: d.decision_latency.as_secs_f64() * 1e3,
                        })
                        .expect("serializable"),
                    );
                }
            }
        },
        Command::Serve { bind } => {
            if let Some(b) = bind {
                cfg.service.bind = b;
            }
            runtime()?.block_on(eiarag_service::serve(&cfg))?;
        }
    }
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Config(format!("cannot start async runtime: {e}")))
}

fn route_remote(url: &str, questions: &[String], out: Printer) -> Result<(), CliError> {
    let client = ServiceClient::new(url)?;
    runtime()?.block_on(async {
        for q in questions {
            let resp = client.route(q).await?;
            out.emit(serde_json::to_value(resp).expect("serializable"));
        }
        Ok(())
    })
}

fn embed_all(env: &Environment, set: &QuerySet, layer: u32, include_bos: bool) -> Result<Vec<SentenceEmbedding>> {
    set.iter()
        .map(|q| {
            sentence_embedding(env.backends.embedder.as_ref(), &q.id, &q.question, layer, include_bos)
                .map_err(|e| Error::for_query(&q.id, e))
        })
        .collect()
}
