use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ctf_core::pipeline::{self, Backend, PipelineConfig, Stage};

/// Coarse-to-fine candidate classification cascade.
#[derive(Parser)]
#[command(name = "ctf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Crge,
    Spg,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate (or ingest) the train/test candidate files.
    Synth,
    /// Fit the multiple-instance coarse classifier.
    TrainCoarse,
    /// Choose the pruning threshold and drop clear negatives.
    Prune,
    /// Select features on the surviving candidates.
    Select,
    /// Fit the embedding.
    Embed {
        /// Overrides `embed.backend`.
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
    },
    /// Build per-class templates in the embedded space.
    Cluster,
    /// Score every candidate with the cascade.
    Score,
    /// Write FROC curves and the summary.
    Evaluate,
    /// Counterpart retrieval hit rates.
    Retrieve,
    /// All stages in order.
    Run,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Synth => Stage::Synth,
            Command::TrainCoarse => Stage::TrainCoarse,
            Command::Prune => Stage::Prune,
            Command::Select => Stage::Select,
            Command::Embed { .. } => Stage::Embed,
            Command::Cluster => Stage::Cluster,
            Command::Score => Stage::Score,
            Command::Evaluate => Stage::Evaluate,
            Command::Retrieve => Stage::Retrieve,
            Command::Run => return None,
        })
    }
}

fn run(cli: &Cli) -> ctf_core::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.output {
        cfg.output = out.clone();
    }
    if let Command::Embed { backend: Some(b) } = cli.command {
        cfg.embed.backend = match b {
            BackendArg::Crge => Backend::Crge,
            BackendArg::Spg => Backend::Spg,
        };
    }
    match cli.command.stage() {
        Some(stage) => pipeline::run_stage(stage, &cfg),
        None => pipeline::run_pipeline(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
