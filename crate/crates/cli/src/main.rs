use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

mod commands;
mod config;

/// Motion-aware video token models: data, training, checks and cost tables.
///
/// Run settings resolve in three layers: built-in defaults, then the JSON
/// config file, then command-line flags.
#[derive(Parser, Debug)]
#[command(name = "kino", version)]
struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, env = "KINO_WORKERS", global = true)]
    workers: Option<usize>,

    /// Print the JSON summary on stdout instead of the text report.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic video dataset.
    GenData(commands::GenDataArgs),
    /// Train a model from a run config.
    Train(commands::TrainArgs),
    /// Evaluate a trained run on a dataset.
    Eval(commands::EvalArgs),
    /// Run numerical checks.
    Check(commands::CheckArgs),
    /// Time a kernel over sequence lengths and fit its growth exponent.
    Bench(commands::BenchArgs),
    /// Report analytic FLOPs and parameters, or total training compute.
    Cost(commands::CostArgs),
}

/// Result of one subcommand.
pub struct Outcome {
    pub passed: bool,
    pub text: String,
    pub summary: Value,
    /// Directory that receives `summary.json`.
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct OutArg {
    /// Directory for every file this command writes.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const SUMMARY_FILE: &str = "summary.json";

fn write_summary(dir: &Path, summary: &Value) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = serde_json::to_string_pretty(summary)? + "\n";
    std::fs::write(dir.join(SUMMARY_FILE), text).context("writing summary")?;
    Ok(())
}

fn run(cli: Cli) -> Result<Outcome> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Check(a) => commands::check(a),
        Command::Bench(a) => commands::bench(a),
        Command::Cost(a) => commands::cost(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(o) => {
            if let Some(dir) = &o.out {
                if let Err(e) = write_summary(dir, &o.summary) {
                    eprintln!("error: {e:#}");
                    return ExitCode::from(2);
                }
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&o.summary).unwrap_or_default());
            } else {
                print!("{}", o.text);
            }
            if o.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
