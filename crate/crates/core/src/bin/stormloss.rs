use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stormloss::cli::{run_stage, Overrides, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "stormloss", version, about = "Windstorm loss-level classification pipeline")]
struct Args {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Validate and join the event, meteo and resilience tables.
    Ingest,
    /// Keep the top loss quartile, assign loss levels, fix the split.
    Label,
    /// Fit a forest on the training partition.
    Train,
    /// Grid search with cross-validation on the training partition.
    Tune,
    /// Score the trained forest on the test partition.
    Evaluate,
    /// Feature importances of the trained forest.
    Importance,
    /// Consolidated JSON and text report.
    Report,
    /// Write synthetic input tables.
    Synth,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Stage {
        match c {
            Command::Ingest => Stage::Ingest,
            Command::Label => Stage::Label,
            Command::Train => Stage::Train,
            Command::Tune => Stage::Tune,
            Command::Evaluate => Stage::Evaluate,
            Command::Importance => Stage::Importance,
            Command::Report => Stage::Report,
            Command::Synth => Stage::Synth,
        }
    }
}

fn run(args: Args) -> stormloss::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: args.seed,
        threads: args.threads,
        out: args.out,
    });
    for path in run_stage(args.command.into(), &cfg)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stormloss: {e}");
            ExitCode::FAILURE
        }
    }
}
