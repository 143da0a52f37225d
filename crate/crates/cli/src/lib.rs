//! Subcommand implementations behind the `dmqn` binary.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use dmqn::bench::bench_scaling;
use dmqn::cache::{precompute, InterestCache};
use dmqn::config::RunConfig;
use dmqn::data::{load_jsonl, SyntheticDataset, TrainingInstance};
use dmqn::serving::{ScoreRequest, Scorer};
use dmqn::train::{checkpoint, evaluate, Trainer};
use dmqn::{Error, Exec, Model};

#[derive(Debug, Parser)]
#[command(name = "dmqn", version, about = "Quantized long-sequence CTR model: data, training, caching and serving")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub port: Option<u16>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Write synthetic train/valid/test JSONL files.
    GenData,
    /// Train on the train split and write a checkpoint after every epoch.
    Train,
    /// Score the test split and print AUC and logloss.
    Eval,
    /// Write the interest cache for every user in the test split.
    Precompute,
    /// Score JSONL requests from stdin, one JSONL response per line.
    Score,
    /// Serve POST /score over HTTP.
    Serve,
    /// Time forward passes across sequence lengths.
    Bench,
}

/// Exit status for a failed run: 1 for bad input, 2 for runtime failures.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

pub fn load_config(global: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.override_seed(seed);
    }
    if let Some(port) = global.port {
        cfg.serve.port = port;
    }
    cfg.validate()?;
    log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
    Ok(cfg)
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::config(format!("--{flag} is required")).into())
}

fn load_split(path: &Path, tolerance: f64) -> anyhow::Result<Vec<TrainingInstance>> {
    let load = load_jsonl(path, tolerance).with_context(|| format!("loading {}", path.display()))?;
    if !load.skipped.is_empty() {
        log::warn!("{}: skipped {} malformed lines", path.display(), load.skipped.len());
    }
    log::info!("{}: {} instances", path.display(), load.instances.len());
    Ok(load.instances)
}

fn print_json(out: &mut impl Write, value: &Value) -> anyhow::Result<()> {
    writeln!(out, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

/// Runs one subcommand, writing machine-readable results to `out`.
pub fn run(cli: &Cli, stdin: impl BufRead, out: &mut impl Write) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli.global)?;
    if let Some(dir) = &cli.global.out {
        if matches!(cli.command, Command::GenData) {
            cfg.data.dir = dir.clone();
        }
    }
    let exec = Exec::Parallel;
    match cli.command {
        Command::GenData => {
            let ds = SyntheticDataset::new(cfg.data.synthetic.clone())?;
            let d = &cfg.data;
            ds.write_splits(&d.split, &d.train_path(), &d.valid_path(), &d.test_path())?;
            let s = ds.split(&d.split);
            print_json(
                out,
                &json!({
                    "dir": d.dir,
                    "train": s.train.len(),
                    "valid": s.valid.len(),
                    "test": s.test.len(),
                    "threshold": ds.threshold(),
                }),
            )
        }
        Command::Train => {
            let ckpt = required(&cli.global.checkpoint, "checkpoint")?;
            let train = load_split(&cfg.data.train_path(), cfg.data.tolerance)?;
            let valid_path = cfg.data.valid_path();
            let valid = if valid_path.exists() {
                load_split(&valid_path, cfg.data.tolerance)?
            } else {
                Vec::new()
            };
            let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
            let mut trainer = Trainer::new(&mut model, cfg.train.clone(), exec)?;
            let reports = trainer.fit(&train, |m, report| {
                if !valid.is_empty() {
                    let metrics = evaluate(m, &valid, exec)?;
                    log::info!("epoch {}: validation {}", report.epoch, serde_json::to_string(&metrics)?);
                    report.validation = Some(metrics);
                }
                checkpoint::save(m, ckpt)
            })?;
            print_json(out, &json!({ "checkpoint": ckpt, "epochs": reports }))
        }
        Command::Eval => {
            let model = checkpoint::load(required(&cli.global.checkpoint, "checkpoint")?)?;
            let test = load_split(&cfg.data.test_path(), cfg.data.tolerance)?;
            let report = evaluate(&model, &test, exec)?;
            print_json(out, &serde_json::to_value(report)?)
        }
        Command::Precompute => {
            let model = checkpoint::load(required(&cli.global.checkpoint, "checkpoint")?)?;
            let path = required(&cli.global.cache, "cache")?;
            let test = load_split(&cfg.data.test_path(), cfg.data.tolerance)?;
            let users = precompute(&model, &test, path, exec)?;
            print_json(out, &json!({ "cache": path, "users": users }))
        }
        Command::Score => {
            let scorer = scorer(&cli.global)?;
            score_lines(&scorer, stdin, out, exec)
        }
        Command::Serve => {
            let scorer = Arc::new(scorer(&cli.global)?);
            let addr = format!("{}:{}", cfg.serve.host, cfg.serve.port);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                log::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, router(scorer)).await?;
                anyhow::Ok(())
            })
        }
        Command::Bench => {
            let report = bench_scaling(&cfg.bench)?;
            print_json(out, &serde_json::to_value(report)?)
        }
    }
}

fn scorer(global: &GlobalArgs) -> anyhow::Result<Scorer> {
    let model = checkpoint::load(required(&global.checkpoint, "checkpoint")?)?;
    let cache = global.cache.as_deref().map(InterestCache::open).transpose()?;
    Ok(Scorer::new(model, cache)?)
}

/// Scores every request line; a bad line yields an `error` object in its
/// place and makes the run fail after all lines are written.
pub fn score_lines(scorer: &Scorer, input: impl BufRead, out: &mut impl Write, exec: Exec) -> anyhow::Result<()> {
    let mut parsed = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        parsed.push(serde_json::from_str::<ScoreRequest>(&line).map_err(|e| format!("line {}: {e}", i + 1)));
    }
    let valid: Vec<ScoreRequest> = parsed.iter().filter_map(|p| p.as_ref().ok().cloned()).collect();
    let mut scored = scorer.score_batch(&valid, exec).into_iter();
    let mut failures = 0usize;
    for p in parsed {
        let value = match p {
            Ok(_) => match scored.next().expect("one result per valid request") {
                Ok(r) => serde_json::to_value(r)?,
                Err(e) => {
                    failures += 1;
                    json!({ "error": e.to_string() })
                }
            },
            Err(msg) => {
                failures += 1;
                json!({ "error": msg })
            }
        };
        print_json(out, &value)?;
    }
    if failures > 0 {
        return Err(Error::contract(format!("{failures} request(s) failed")).into());
    }
    Ok(())
}

fn score_value(scorer: &Scorer, body: Value) -> Result<Value, String> {
    let score_one = |v: Value| -> Result<Value, String> {
        let req: ScoreRequest = serde_json::from_value(v).map_err(|e| e.to_string())?;
        let resp = scorer.score(&req).map_err(|e| e.to_string())?;
        serde_json::to_value(resp).map_err(|e| e.to_string())
    };
    match body {
        Value::Array(items) => items.into_iter().map(score_one).collect::<Result<Vec<_>, _>>().map(Value::Array),
        other => score_one(other),
    }
}

async fn score_handler(State(scorer): State<Arc<Scorer>>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let result = tokio::task::spawn_blocking(move || score_value(&scorer, body)).await;
    match result {
        Ok(Ok(v)) => (StatusCode::OK, Json(v)),
        Ok(Err(msg)) => (StatusCode::BAD_REQUEST, Json(json!({ "error": msg }))),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": e.to_string() }))),
    }
}

/// `POST /score` with one request object or an array of them.
pub fn router(scorer: Arc<Scorer>) -> Router {
    Router::new().route("/score", post(score_handler)).with_state(scorer)
}
