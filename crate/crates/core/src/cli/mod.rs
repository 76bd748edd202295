//! The `attn-scalpel` command line.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, ErrorClass, Result};
use crate::eval::EvalDataset;
use crate::fixtures::{first_token_task, planted_model, planted_vocab, recall_task};
use crate::io::{to_json, write_text};
use crate::model::write_checkpoint;
use commands::{cmd_correlate, cmd_eval, cmd_induction, cmd_prune, cmd_score_ffns, cmd_score_heads, fixture_config};
use config::{parse_overrides, Inputs, RunConfig};
use output::Outputs;

pub const THREADS_ENV: &str = "ATTN_SCALPEL_THREADS";

#[derive(Debug, Parser)]
#[command(name = "attn-scalpel", version, about = "Score, prune and probe the heads of a small decoder-only transformer")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the planted-circuit fixture: checkpoint, vocabulary, two tasks
    /// and a run config.
    MakeFixture(FixtureArgs),
    /// Few-shot accuracy per task and shot count.
    Eval(RunArgs),
    /// Gradient head importance per task and shot count, plus the aggregate.
    ScoreHeads(RunArgs),
    /// Oracle FFN importance per task and shot count, plus the aggregate.
    ScoreFfns(RunArgs),
    /// Accuracy curves while removing components least-important first.
    Prune(RunArgs),
    /// Prefix-matching and copying scores and capacity-retained curves.
    Induction(RunArgs),
    /// Rank correlations across tasks and across shot counts.
    Correlate(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run config (JSON).
    #[arg(long, short)]
    config: PathBuf,

    /// Config overrides as `--dotted.key value`, e.g. `--prune.target both`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct FixtureArgs {
    /// Directory to write into.
    #[arg(long)]
    out: PathBuf,
    /// Seed for the background weights and the generated tasks.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    eval: usize,
    /// Induction sequences in the generated run config.
    #[arg(long, default_value_t = 10)]
    num_sequences: usize,
}

pub fn exit_code(err: &Error) -> i32 {
    match err.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    // A second call in the same process keeps the first pool.
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("thread pool already configured");
    }
    Ok(())
}

fn write_dataset(dir: &Path, ds: &EvalDataset) -> Result<()> {
    write_text(&dir.join(format!("{}.jsonl", ds.name)), &ds.eval_jsonl())?;
    write_text(&dir.join(format!("{}.train.jsonl", ds.name)), &ds.train_jsonl())
}

fn make_fixture(args: &FixtureArgs) -> Result<()> {
    let dir = &args.out;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_checkpoint(&dir.join("model.ckpt"), &planted_model(args.seed)?)?;
    write_text(&dir.join("vocab.txt"), &planted_vocab().to_text())?;
    write_dataset(dir, &first_token_task(args.train, args.eval, args.seed))?;
    write_dataset(dir, &recall_task(args.train, args.eval, args.seed.wrapping_add(1)))?;
    write_text(&dir.join("run.json"), &to_json(&fixture_config(args.num_sequences)))?;
    log::info!("fixture written to {}", dir.display());
    Ok(())
}

fn run_pipeline(name: &str, args: &RunArgs, cmd: fn(&Inputs, &mut Outputs) -> Result<()>) -> Result<()> {
    let overrides = parse_overrides(&args.overrides)?;
    let config = RunConfig::load(&args.config, &overrides)?;
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let digest = config.digest();
    let inputs = Inputs::load(config, &base)?;
    let mut out = Outputs::new(inputs.output_dir(), name);
    let outcome = cmd(&inputs, &mut out);
    out.finish(digest, Some(inputs.checkpoint_digest.clone()), &outcome)?;
    outcome
}

pub fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::MakeFixture(a) => make_fixture(a),
        Command::Eval(a) => run_pipeline("eval", a, cmd_eval),
        Command::ScoreHeads(a) => run_pipeline(commands::SCORE_HEADS, a, cmd_score_heads),
        Command::ScoreFfns(a) => run_pipeline(commands::SCORE_FFNS, a, cmd_score_ffns),
        Command::Prune(a) => run_pipeline("prune", a, cmd_prune),
        Command::Induction(a) => run_pipeline("induction", a, cmd_induction),
        Command::Correlate(a) => run_pipeline("correlate", a, cmd_correlate),
    }
}

/// Parse `args`, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
