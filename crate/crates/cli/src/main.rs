//! Command-line front end: dataset preparation, training, evaluation,
//! single-session prediction, importance inspection and the scaling
//! benchmark, all driven by a config file plus flag overrides.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or input error.

mod config;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use config::{Overrides, RunConfig};
use sriem_core::bench::{bench_t_scaling, records_to_csv};
use sriem_core::dataset::{load_clicks, preprocess, PreprocessConfig, SessionCorpus};
use sriem_core::error::Error as CoreError;
use sriem_core::eval::evaluate;
use sriem_core::model::{forward_session, ModelParams};
use sriem_core::trainer::{load_checkpoint, save_checkpoint, train, TrainReport};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "sriem",
    version,
    about = "Session-based recommender with importance-extraction attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a click log, preprocess it and write the corpus cache
    Prepare {
        /// Raw click-log file
        #[arg(long)]
        data: PathBuf,
        /// Directory that will hold the run directory
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train a model on a prepared corpus
    Train {
        /// Corpus cache produced by `prepare`
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on the test split of a corpus
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Rank the top-k next items for one session (item keys, space-separated)
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus cache, for the item vocabulary
        #[arg(long)]
        data: PathBuf,
        /// Session as external item keys, e.g. "214536502 214536500"
        #[arg(long)]
        session: String,
        /// How many items to return
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the per-item importance weights for one session
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        session: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Time the attention forward pass across session lengths
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated session lengths
        #[arg(long, default_value = "8,16,32,64,128")]
        t_grid: String,
        /// Repetitions per grid point (at least 30)
        #[arg(long, default_value_t = 60)]
        reps: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code_for(&err)
        }
    }
}

/// Input problems exit 2, runtime failures exit 1.
fn exit_code_for(err: &anyhow::Error) -> ExitCode {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::Io { .. }
                | CoreError::Format { .. }
                | CoreError::EmptyCorpus { .. }
                | CoreError::Checkpoint(_)
                | CoreError::UnknownItem(_)
                | CoreError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ExitCode::from(2);
        }
    }
    ExitCode::from(1)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            data,
            out,
            overrides,
        } => cmd_prepare(&data, &out, &overrides),
        Command::Train {
            data,
            out,
            overrides,
        } => cmd_train(&data, &out, &overrides),
        Command::Eval {
            checkpoint,
            data,
            out,
            overrides,
        } => cmd_eval(&checkpoint, &data, &out, &overrides),
        Command::Predict {
            checkpoint,
            data,
            session,
            k,
            overrides,
        } => cmd_predict(&checkpoint, &data, &session, k, &overrides),
        Command::Inspect {
            checkpoint,
            data,
            session,
            overrides,
        } => cmd_inspect(&checkpoint, &data, &session, &overrides),
        Command::Bench {
            out,
            t_grid,
            reps,
            overrides,
        } => cmd_bench(&out, &t_grid, reps, &overrides),
    }
}

/// `{out}/run-{unix-seconds}-seed{seed}`, suffixed on collision.
fn make_run_dir(out: &Path, seed: u64) -> Result<PathBuf> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut suffix = 0u32;
    loop {
        let name = if suffix == 0 {
            format!("run-{stamp}-seed{seed}")
        } else {
            format!("run-{stamp}-seed{seed}-{suffix}")
        };
        let dir = out.join(name);
        match std::fs::create_dir_all(out).and_then(|()| std::fs::create_dir(&dir)) {
            Ok(()) => {
                println!("run-dir: {}", dir.display());
                return Ok(dir);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists && suffix < 1000 => {
                suffix += 1;
            }
            Err(e) => {
                return Err(e).context(format!(
                    "cannot create run directory under {}",
                    out.display()
                ))
            }
        }
    }
}

fn config_comment_lines(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_prepare(data: &Path, out: &Path, overrides: &Overrides) -> Result<()> {
    let config = RunConfig::resolve(overrides)?;
    let run_dir = make_run_dir(out, config.seed)?;

    let outcome = load_clicks(data, config.format)?;
    if outcome.events.is_empty() {
        eprintln!("warning: {} contained no events", data.display());
    }
    if outcome.malformed > 0 {
        eprintln!(
            "warning: skipped {} malformed of {} lines; samples: {:?}",
            outcome.malformed, outcome.total_lines, outcome.samples
        );
    }
    let corpus = preprocess(
        &outcome.events,
        &PreprocessConfig {
            min_item_support: config.min_item_support,
            test_days: config.test_days,
        },
    )?;

    let cache = run_dir.join("corpus.json");
    corpus.save(&cache)?;
    let mut kv = String::new();
    for (k, v) in config.as_map() {
        kv.push_str(&format!("{k}={v}\n"));
    }
    write_text(&run_dir.join("config.kv"), &kv)?;

    let stats = &corpus.stats;
    println!("corpus: {}", cache.display());
    println!("# clicks            {}", stats.clicks);
    println!("# training sessions {}", stats.train_sessions);
    println!("# test sessions     {}", stats.test_sessions);
    println!("# items             {}", stats.items);
    println!("Average length      {:.2}", stats.avg_session_length);
    Ok(())
}

fn cmd_train(data: &Path, out: &Path, overrides: &Overrides) -> Result<()> {
    let config = RunConfig::resolve(overrides)?;
    let corpus = SessionCorpus::load(data)?;
    let run_dir = make_run_dir(out, config.seed)?;

    let outcome = train(&corpus, config.model_config(), &config.train_config())?;
    if let Some(reason) = &outcome.report.aborted {
        eprintln!("warning: training aborted early: {reason}");
    }

    let ckpt = run_dir.join("model.ckpt");
    save_checkpoint(&outcome.params, &ckpt)?;
    write_reports(&run_dir, &config, &outcome.report)?;

    for epoch in &outcome.report.epochs {
        println!(
            "epoch {:>3}  loss {:.4}  val recall@{} {:.4}  val mrr@{} {:.4}  lr {:e}",
            epoch.epoch,
            epoch.mean_loss,
            config.n,
            epoch.val_recall,
            config.n,
            epoch.val_mrr,
            epoch.lr
        );
    }
    println!(
        "best epoch: {}  checkpoint: {}",
        outcome
            .report
            .best_epoch
            .map(|e| e.to_string())
            .unwrap_or_else(|| "-".into()),
        ckpt.display()
    );
    Ok(())
}

/// report.json and report.csv are deterministic for a fixed seed; wall-clock
/// timings go to timings.csv.
fn write_reports(run_dir: &Path, config: &RunConfig, report: &TrainReport) -> Result<()> {
    let deterministic = report.deterministic_view();
    let json = serde_json::json!({
        "config": config.as_map(),
        "report": deterministic,
    });
    write_text(
        &run_dir.join("report.json"),
        &serde_json::to_string_pretty(&json)?,
    )?;

    let mut csv = config_comment_lines(&config.as_map());
    csv.push_str(&deterministic.to_csv());
    write_text(&run_dir.join("report.csv"), &csv)?;

    let mut timings = String::from("epoch,wall_secs\n");
    for e in &report.epochs {
        timings.push_str(&format!("{},{:.3}\n", e.epoch, e.wall_secs));
    }
    write_text(&run_dir.join("timings.csv"), &timings)?;
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path, overrides: &Overrides) -> Result<()> {
    let config = RunConfig::resolve(overrides)?;
    let corpus = SessionCorpus::load(data)?;
    let params = load_checkpoint(checkpoint, Some(corpus.vocab_hash()))?;
    let run_dir = make_run_dir(out, config.seed)?;

    let report = evaluate(&params, &corpus.test, config.n, config.max_len)?;
    let json = serde_json::json!({
        "config": config.as_map(),
        "report": report,
    });
    write_text(
        &run_dir.join("eval.json"),
        &serde_json::to_string_pretty(&json)?,
    )?;
    let mut csv = config_comment_lines(&config.as_map());
    csv.push_str(&report.to_csv());
    write_text(&run_dir.join("eval.csv"), &csv)?;

    println!(
        "recall@{} {:.4}  mrr@{} {:.4}  examples {}",
        config.n, report.recall, config.n, report.mrr, report.example_count
    );
    for (len, bucket) in &report.per_length {
        println!(
            "  length {:>2}  recall {:.4}  mrr {:.4}  count {}",
            len, bucket.recall, bucket.mrr, bucket.count
        );
    }
    Ok(())
}

/// Map external item keys to internal indices, failing on the first unknown.
fn parse_session(corpus: &SessionCorpus, session: &str) -> Result<Vec<usize>> {
    let mut items = Vec::new();
    for key in session.split_whitespace() {
        let idx = corpus
            .item_index(key)
            .ok_or_else(|| anyhow!(CoreError::UnknownItem(key.to_string())))?;
        items.push(idx);
    }
    if items.is_empty() {
        bail!(CoreError::Config("session is empty".into()));
    }
    Ok(items)
}

fn load_model_for(corpus: &SessionCorpus, checkpoint: &Path) -> Result<ModelParams> {
    Ok(load_checkpoint(checkpoint, Some(corpus.vocab_hash()))?)
}

fn cmd_predict(
    checkpoint: &Path,
    data: &Path,
    session: &str,
    k: usize,
    overrides: &Overrides,
) -> Result<()> {
    let config = RunConfig::resolve(overrides)?;
    let corpus = SessionCorpus::load(data)?;
    let params = load_model_for(&corpus, checkpoint)?;
    let items = parse_session(&corpus, session)?;
    let truncated = sriem_core::dataset::truncate_prefix(&items, config.max_len);

    let n = corpus.n_items();
    let k = if k > n {
        eprintln!("warning: k={k} clipped to the {n} available items");
        n
    } else {
        k
    };

    let result = forward_session(&params, truncated)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        result.scores[b]
            .partial_cmp(&result.scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let top: Vec<serde_json::Value> = order[..k]
        .iter()
        .map(|&j| {
            serde_json::json!({
                "item": corpus.item_key(j + 1),
                "prob": result.probs[j],
                "score": result.scores[j],
            })
        })
        .collect();
    let out = serde_json::json!({
        "session": session.split_whitespace().collect::<Vec<_>>(),
        "k": k,
        "top": top,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_inspect(checkpoint: &Path, data: &Path, session: &str, overrides: &Overrides) -> Result<()> {
    let config = RunConfig::resolve(overrides)?;
    let corpus = SessionCorpus::load(data)?;
    let params = load_model_for(&corpus, checkpoint)?;
    let items = parse_session(&corpus, session)?;
    let truncated = sriem_core::dataset::truncate_prefix(&items, config.max_len);

    let result = forward_session(&params, truncated)?;
    let weights = result
        .item_weights
        .ok_or_else(|| anyhow!("the checkpoint's variant exposes no per-item weights"))?;
    let entries: Vec<serde_json::Value> = truncated
        .iter()
        .zip(&weights)
        .map(|(&idx, &w)| {
            serde_json::json!({
                "item": corpus.item_key(idx),
                "weight": w,
            })
        })
        .collect();
    let out = serde_json::json!({
        "variant": params.config.variant.to_string(),
        "session": session.split_whitespace().collect::<Vec<_>>(),
        "weights": entries,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_bench(out: &Path, t_grid: &str, reps: usize, overrides: &Overrides) -> Result<()> {
    let config = RunConfig::resolve(overrides)?;
    let grid: Vec<usize> = t_grid
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| anyhow!("bad t-grid entry `{s}`: {e}"))
        })
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        bail!(CoreError::Config("t-grid is empty".into()));
    }
    let run_dir = make_run_dir(out, config.seed)?;

    let fit = bench_t_scaling(config.variant, config.d, config.l, &grid, reps, config.seed)?;
    let mut csv = config_comment_lines(&config.as_map());
    csv.push_str(&records_to_csv(&fit.records));
    write_text(&run_dir.join("bench.csv"), &csv)?;

    for r in &fit.records {
        println!(
            "{} t={:>4} d={} l={}  median {:>10.0} ns  iqr {:>8.0} ns",
            r.variant, r.t, r.d, r.l, r.median_ns, r.iqr_ns
        );
    }
    println!("log-log slope vs t: {:.3}", fit.slope);
    Ok(())
}
