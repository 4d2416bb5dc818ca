use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cotpipe::emitter::{read_dataset, render_report, report, write_atomic};
use cotpipe::pipeline::{
    encode_lines, load_benchmark, parse_stages, render_plan, Config, Pipeline, PipelineError, Stage,
};
use cotpipe::text::char_len;
use tracing_subscriber::EnvFilter;

/// Build verified chain-of-thought datasets from seed QA corpora.
#[derive(Parser)]
#[command(name = "cotpipe", version)]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, short, global = true, default_value = "cotpipe.toml")]
    config: PathBuf,

    /// Log more (repeat for more detail).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunOpts {
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Skip stages whose checkpoint matches the current inputs.
    #[arg(long)]
    resume: bool,

    /// Validate the config and print the plan without running anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitBy {
    Task,
    Difficulty,
}

#[derive(Subcommand)]
enum Command {
    /// Run several stages in order (all by default).
    Run {
        /// `all` or a comma-separated list, e.g. `ingest,mke`.
        #[arg(long, default_value = "all")]
        stages: String,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Read, deduplicate and decontaminate the seed sources.
    Ingest(RunOpts),
    /// Curate seeds and mine new pairs (Q2A, A2Q, T2Q).
    Mke(RunOpts),
    /// Sample and verify candidate reasoning traces.
    Sample(RunOpts),
    /// Self-correct items with no verified candidate.
    Scr(RunOpts),
    /// Attach metadata to every solved item.
    Annotate(RunOpts),
    /// Apply the quality gate and write the dataset.
    Emit(RunOpts),
    /// Print statistics for a written dataset.
    Report {
        /// Dataset file; defaults to the configured output.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Grade benchmark responses and report pass@1.
    Eval {
        /// JSON Lines benchmark: question, gold, kind, optional responses.
        #[arg(long)]
        benchmark: PathBuf,
        /// Where per-item results go; defaults to `<workdir>/eval/results.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split a dataset for evaluation.
    Split {
        #[arg(long, value_enum)]
        by: SplitBy,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory; defaults to `<workdir>/splits/<by>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pairs drawn from each side of a difficulty split.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<Config, PipelineError> {
    let mut cfg = Config::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

async fn run_stages(config: &Path, stages: &[Stage], opts: &RunOpts) -> Result<i32> {
    let cfg = load_config(config, opts.seed)?;
    let pipeline = Pipeline::new(cfg)?.resume(opts.resume);
    if opts.dry_run {
        print!("{}", render_plan(&pipeline.plan(stages)?));
        return Ok(0);
    }
    let canceller = pipeline.canceller();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            eprintln!("interrupted; finishing in-flight requests");
            canceller.cancel();
        }
    });
    let report = pipeline.run(stages).await?;
    print!("{}", report.render());
    Ok(report.exit_code())
}

fn dataset_path(config: &Path, explicit: Option<PathBuf>) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p),
        None => Ok(load_config(config, None)?.output.dataset),
    }
}

async fn execute(cli: Cli) -> Result<i32> {
    let one = |s: Stage| vec![s];
    match cli.command {
        Command::Run { stages, opts } => run_stages(&cli.config, &parse_stages(&stages).map_err(PipelineError::from)?, &opts).await,
        Command::Ingest(o) => run_stages(&cli.config, &one(Stage::Ingest), &o).await,
        Command::Mke(o) => run_stages(&cli.config, &one(Stage::Mke), &o).await,
        Command::Sample(o) => run_stages(&cli.config, &one(Stage::Sample), &o).await,
        Command::Scr(o) => run_stages(&cli.config, &one(Stage::Scr), &o).await,
        Command::Annotate(o) => run_stages(&cli.config, &one(Stage::Annotate), &o).await,
        Command::Emit(o) => run_stages(&cli.config, &[Stage::Gate, Stage::Emit], &o).await,
        Command::Report { dataset, json } => {
            let path = dataset_path(&cli.config, dataset)?;
            let samples = read_dataset(&path).with_context(|| format!("reading {}", path.display()))?;
            let r = report(&samples, &char_len)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                print!("{}", render_report(&r));
            }
            Ok(0)
        }
        Command::Eval { benchmark, out } => {
            let cfg = load_config(&cli.config, None)?;
            let out = out.unwrap_or_else(|| cfg.workdir.join("eval/results.jsonl"));
            let items = load_benchmark(&benchmark).map_err(PipelineError::from)?;
            let pipeline = Pipeline::new(cfg)?;
            let (results, summary) = pipeline.evaluate(&items).await?;
            write_atomic(&out, &encode_lines(&results)?)?;
            println!(
                "items {}  responses {}  pass@1 {:.4}  avg length {:.1}  unextractable {}  ungraded {}",
                summary.items,
                summary.responses,
                summary.pass_at_1,
                summary.avg_response_len,
                summary.unextractable,
                summary.ungraded
            );
            println!("results: {}", out.display());
            Ok(if summary.ungraded > 0 { 1 } else { 0 })
        }
        Command::Split {
            by,
            dataset,
            out,
            samples,
        } => {
            let cfg = load_config(&cli.config, None)?;
            let path = dataset.unwrap_or_else(|| cfg.output.dataset.clone());
            let data = read_dataset(&path).with_context(|| format!("reading {}", path.display()))?;
            if data.is_empty() {
                bail!("{} holds no samples", path.display());
            }
            let name = match by {
                SplitBy::Task => "task",
                SplitBy::Difficulty => "difficulty",
            };
            let out = out.unwrap_or_else(|| cfg.workdir.join("splits").join(name));
            let pipeline = Pipeline::new(cfg)?;
            match by {
                SplitBy::Task => {
                    for (label, (train, held)) in pipeline.split_by_task(&data, &out)? {
                        println!("{label:<28} train {train:>6}  held-out {held:>6}");
                    }
                }
                SplitBy::Difficulty => {
                    let pairs: Vec<_> = data.into_iter().map(|s| s.qa).collect();
                    let (simple, hard, unlabeled) = pipeline.split_by_difficulty(&pairs, samples, &out).await?;
                    println!("simple {simple}  hard {hard}  unlabeled {unlabeled}");
                }
            }
            println!("written to {}", out.display());
            Ok(0)
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .with_writer(std::io::stderr)
        .init();

    match execute(cli).await {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            match e.downcast_ref::<PipelineError>() {
                Some(pe) => eprintln!("error [{}]: {pe}", pe.code()),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(2)
        }
    }
}
