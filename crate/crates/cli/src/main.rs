//! `ta2cl`: synthetic data, pretraining, evaluation and ablations from one JSON config.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::AblationKind;
use config::RunConfig;
use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "ta2cl", version, about = "Asynchronous-alignment contrastive learning experiments")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the checkpoint path.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Worker threads for folds and variants (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (ESEG1 files plus manifest).
    Synth,
    /// Contrastive pretraining on the whole dataset; writes a checkpoint.
    Pretrain,
    /// Classify every fold with a frozen checkpoint.
    Classify,
    /// Cross-subject evaluation: per-fold pretraining unless a checkpoint is set.
    Eval,
    /// Paired ablation runs.
    Ablate {
        #[arg(value_enum)]
        kind: AblationKind,
    },
    /// K=1 versus K=3 Top-3 similarity variance histograms.
    Top3,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let path = cli
        .config
        .ok_or_else(|| Failure::Validation("--config is required".into()))?;
    if cli.jobs == Some(0) {
        return Err(Failure::Validation("--jobs must be >= 1".into()));
    }
    let out_override = cli.out.is_some();
    let cfg = RunConfig::load(&path)?.resolve(cli.seed, cli.out, cli.checkpoint);
    cfg.validate()?;
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    log::info!("{}: seed {}", cfg.name, cfg.seed);
    match cli.command {
        Command::Synth => commands::synth(&cfg, out_override),
        Command::Pretrain => commands::pretrain_cmd(&cfg),
        Command::Classify => commands::classify(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Ablate { kind } => commands::ablate(&cfg, kind),
        Command::Top3 => commands::top3(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TA2CL_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
