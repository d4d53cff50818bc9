mod manifest;
mod stages;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use regcl_core::config::{PipelineConfig, Precision};
use regcl_core::Exec;

use stages::Ctx;

/// Stage-oriented region representation pipeline. Each stage reads the
/// artifacts of earlier stages from the output directory and records what
/// it read and wrote in `manifests/<stage>.json`.
#[derive(Parser, Debug)]
#[command(name = "regcl", version)]
struct Cli {
    /// Flat key=value config; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `precision` from the config.
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the synthetic world bundle.
    Generate,
    /// Mine street-view and remote-sensing triplets.
    Mine,
    /// Train both visual encoders on the mined triplets.
    TrainVisual,
    /// Train POI category vectors with hierarchical-softmax skip-gram.
    TrainText,
    /// Align fused image and POI embeddings; writes embeddings.csv.
    Fuse,
    /// Regression, ablation and clustering reports.
    Evaluate,
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            PipelineConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

macro_rules! dispatch {
    ($ctx:expr, $f:ident) => {
        match $ctx.cfg.precision {
            Precision::F32 => stages::$f::<f32>(&$ctx),
            Precision::F64 => stages::$f::<f64>(&$ctx),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let ctx = Ctx {
        out: cli.out,
        cfg,
        exec: Exec::default(),
    };
    match cli.command {
        Command::Generate => stages::generate(&ctx),
        Command::Mine => stages::mine(&ctx),
        Command::TrainVisual => dispatch!(ctx, train_visual),
        Command::TrainText => dispatch!(ctx, train_text),
        Command::Fuse => dispatch!(ctx, fuse),
        Command::Evaluate => dispatch!(ctx, evaluate),
        Command::Gradcheck { seeds } => stages::gradcheck(&ctx, seeds),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
