use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ptu_cli::{cmd_report, cmd_run, cmd_synth, cmd_train_source, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "ptu", version, about = "Parameter transfer unit experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic datasets as IDX files.
    Synth(Common),
    /// Train the source network and save its checkpoint.
    TrainSource(Common),
    /// Compare the configured methods on the target dataset.
    Run(Common),
    /// Merge a run directory's CSVs into curves, a gate table and a plot.
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved plan without writing anything.
    #[arg(long)]
    dry_run: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (Command::Synth(c) | Command::TrainSource(c) | Command::Run(c) | Command::Report(c)) =
        &cli.command;
    let cfg = ExperimentConfig::load(&c.config, c.seed, c.out.as_deref())?;
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Synth(_) => cmd_synth(&cfg, c.dry_run, &mut out).map(drop),
        Command::TrainSource(_) => cmd_train_source(&cfg, c.dry_run, &mut out).map(drop),
        Command::Run(_) => cmd_run(&cfg, c.dry_run, &mut out).map(drop),
        Command::Report(_) => cmd_report(&cfg, c.dry_run, &mut out).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
