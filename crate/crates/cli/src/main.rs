use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Train, evaluate and probe inner-thinking transformers.
#[derive(Debug, Parser)]
#[command(name = "itt", version, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a JSON run config.
    ///
    /// Uses --config, --data, --capacity-override, --seed, --threads and --out
    /// (run directory, required). Writes metrics.jsonl, config.json, model.ittc
    /// and invocation.json into --out.
    Train(Flags),
    /// Report loss and perplexity of a checkpoint on a text file.
    ///
    /// Uses --ckpt and --data (required), --capacity-override, --epsilon,
    /// --threads and --out. --epsilon adds the early-exit histogram.
    Eval(Flags),
    /// Evaluate one checkpoint under a grid of capacity vectors.
    ///
    /// Uses --ckpt and --data (required), --grid, --threads and --out. The grid
    /// file holds one vector per line, e.g. `0.7/0.7/off`; without it a
    /// reference grid is used.
    Sweep(Flags),
    /// Export the routing decisions for a text as JSON.
    ///
    /// Uses --ckpt and --text (required), --capacity-override, --threads and --out.
    Trace(Flags),
    /// Gradient nuclear norms on the synthetic arithmetic task.
    ///
    /// Uses --ckpt (required), --seed, --threads and --out (directory for
    /// gnn.csv and gnn_summary.csv; rows go to stdout without it).
    #[command(name = "probe-gnn")]
    ProbeGnn(Flags),
    /// Finite-difference check of every differentiable operation.
    ///
    /// Uses --seed (default: seeds 0..5), --threads and --out. Exits 0 only if
    /// every check passes.
    Gradcheck(Flags),
    /// FLOPs breakdown of a configuration and its ratio to the matching Loop model.
    ///
    /// Uses exactly one of --config or --ckpt, plus --capacity-override,
    /// --threads and --out.
    Flops(Flags),
}

/// Every flag is accepted by the parser; each subcommand rejects the ones it
/// does not use.
#[derive(Debug, Default, Clone, Args)]
struct Flags {
    /// Run configuration (JSON).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Checkpoint file.
    #[arg(long, value_name = "FILE")]
    ckpt: Option<PathBuf>,
    /// Text file, read as bytes.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Per-step capacities by label, e.g. "s1=0.7,s2=0.7,s3=0.9"; "off" removes a step.
    #[arg(long, value_name = "SPEC")]
    capacity_override: Option<String>,
    /// Capacity grid file for sweeps.
    #[arg(long, value_name = "FILE")]
    grid: Option<PathBuf>,
    /// Random seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Thread cap, recorded in outputs. Computation is single-threaded.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Output file or directory; standard output when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Input text for trace.
    #[arg(long, value_name = "STR")]
    text: Option<String>,
    /// Cross-entropy threshold for the early-exit probe.
    #[arg(long, value_name = "X")]
    epsilon: Option<f64>,
}

/// Bad invocation: exits with status 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<Usage>() {
                eprintln!("error: {u}");
                eprintln!("run `itt <subcommand> --help` for the accepted flags");
                ExitCode::from(1)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        }
    }
}
