use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use mpcl_cli::commands::{cmd_continual, cmd_prune, cmd_train, output_dir};
use mpcl_cli::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "mpcl",
    version,
    about = "Moment-propagation continual learning experiments"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accepted for compatibility; computation is single-threaded.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single-task model.
    Train(Common),
    /// Train over the configured task sequence.
    Continual(Common),
    /// Pruning sweep and uncertainty CDFs for a checkpoint.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = common.threads {
        log::info!("--threads {n} ignored: running single-threaded");
    }
    let out = output_dir(common.out.clone(), &cfg)?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let (cfg, out) = load(&c)?;
            cmd_train(&cfg, &out)?;
        }
        Command::Continual(c) => {
            let (cfg, out) = load(&c)?;
            cmd_continual(&cfg, &out)?;
        }
        Command::Prune { common, checkpoint } => {
            let (cfg, out) = load(&common)?;
            cmd_prune(&cfg, &checkpoint, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
