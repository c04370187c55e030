//! `attnlab`: attention-placement experiments from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Protocol, RunConfig};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "attnlab", version, about = "Attention-block placement experiments for re-identification backbones")]
struct Cli {
    /// JSON config file; keys mirror the resolved config written to OUT/config.json
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Base seed (takes precedence over the config)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent training runs
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Count MACs and measure latency of insertion plans
    Bench(BenchArgs),
    /// Train a model, optionally over several seeds
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's query and gallery
    Eval(EvalArgs),
    /// Sweep single positions, prune, and search combinations
    Search(SearchArgs),
    /// Render an mAP-versus-speed scatter from a CSV
    Plot(PlotArgs),
    /// Write the synthetic dataset as an image folder with a manifest
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct Overrides {
    /// Config overrides such as `train.epochs=10` or `plan=cnl@6,8,14`
    #[arg(value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Image folder with a manifest (default: synthetic data from the config)
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Manifest path (default: the manifest inside --data)
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Plans to measure (default: the config plan); repeatable
    #[arg(long)]
    plan: Vec<String>,
    /// Also measure the ResNet-101 reference
    #[arg(long)]
    deep: bool,
    /// Report MACs and parameters only, skipping the latency measurement
    #[arg(long)]
    no_timing: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    plan: Option<String>,
    /// Number of seeds, starting from the base seed
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Start from a checkpoint instead of a fresh model
    #[arg(long, value_name = "FILE")]
    init: Option<PathBuf>,
    /// With --init: re-initialize the classifier, train it alone, then train everything
    #[arg(long, requires = "init")]
    finetune: bool,
    /// Epochs of the classifier-only step of --finetune
    #[arg(long, default_value_t = 5)]
    classifier_epochs: usize,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// `standard` or `roreas-shape` (train and test identities disjoint)
    #[arg(long)]
    protocol: Option<Protocol>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct SearchArgs {
    /// Cap on trained combinations
    #[arg(long)]
    budget: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// CSV with an mAP column and a batches/sec column, such as trials.csv
    input: PathBuf,
    #[arg(long, default_value = "mAP vs inference speed")]
    title: String,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    overrides: Overrides,
}

impl std::str::FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "standard" => Ok(Protocol::Standard),
            "roreas-shape" => Ok(Protocol::RoreasShape),
            other => Err(format!("unknown protocol {other:?} (standard|roreas-shape)")),
        }
    }
}

fn resolve(cli: &Cli, overrides: &Overrides, data: Option<&DataArgs>) -> error::Result<RunConfig> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &overrides.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(d) = data {
        if let Some(folder) = &d.data {
            cfg.data.folder = Some(folder.clone());
        }
        if let Some(m) = &d.manifest {
            cfg.data.manifest = Some(m.clone());
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> error::Result<()> {
    let ctx = commands::Context {
        out: cli.out.clone(),
        threads: cli.threads.max(1),
    };
    match &cli.command {
        Command::Bench(a) => {
            let mut cfg = resolve(&cli, &a.overrides, None)?;
            let plans = if a.plan.is_empty() { vec![cfg.plan.clone()] } else { a.plan.clone() };
            cfg.plan = plans.join(" ");
            commands::bench(&ctx, &cfg, &plans, a.deep, !a.no_timing)
        }
        Command::Train(a) => {
            let mut cfg = resolve(&cli, &a.overrides, Some(&a.data))?;
            if let Some(p) = &a.plan {
                cfg.plan = p.clone();
            }
            let init = a.init.as_ref().map(|path| commands::InitFrom {
                path: path.clone(),
                finetune: a.finetune,
                classifier_epochs: a.classifier_epochs,
            });
            commands::train(&ctx, &cfg, a.seeds.max(1), init)
        }
        Command::Eval(a) => {
            let mut cfg = resolve(&cli, &a.overrides, Some(&a.data))?;
            if let Some(p) = a.protocol {
                cfg.eval.protocol = p;
            }
            commands::eval(&ctx, &cfg, &a.checkpoint)
        }
        Command::Search(a) => {
            let mut cfg = resolve(&cli, &a.overrides, Some(&a.data))?;
            if a.budget.is_some() {
                cfg.search.budget = a.budget;
            }
            commands::search(&ctx, &cfg)
        }
        Command::Plot(a) => commands::plot(&ctx, &a.input, &a.title),
        Command::Synth(a) => {
            let cfg = resolve(&cli, &a.overrides, None)?;
            commands::synth(&ctx, &cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e {
                CliError::Usage(_) => "usage error",
                CliError::Data(_) => "data error",
                CliError::Numeric(_) => "numeric failure",
            };
            eprintln!("attnlab: {kind}: {}", e.message());
            ExitCode::from(e.code() as u8)
        }
    }
}
