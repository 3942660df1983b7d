use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bailout_cli::config::{ExperimentConfig, Overrides, ResolvedExperiment, Scenario};
use bailout_cli::{experiment, Result};

#[derive(Parser)]
#[command(name = "bailout", version, about = "Capital-injection planning on a contagion network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit and save the backward value-function policies, one per alpha.
    Fit(RunArgs),
    /// Emit Q tables, Convenience curves and the best-action summary.
    Evaluate(RunArgs),
    /// Locate the critical alpha by scan and geometric bisection.
    SweepAlpha(RunArgs),
    /// Check fitted action values against the exact solver (small networks).
    OracleCheck(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the network source: builtin:kk, builtin:kk-full,
    /// eba-table, or a network TOML file path.
    #[arg(long)]
    network: Option<String>,
    /// Overrides the balance-sheet scenario: baseline or half-equity.
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Overrides both the evaluation and fit sample counts.
    #[arg(long)]
    samples: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ResolvedExperiment> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            network: self.network.clone(),
            scenario: self.scenario,
            samples: self.samples,
        });
        cfg.resolve()
    }
}

fn dispatch(command: &Command) -> Result<Vec<PathBuf>> {
    let (args, run): (&RunArgs, fn(&ResolvedExperiment) -> Result<Vec<PathBuf>>) = match command {
        Command::Fit(a) => (a, experiment::run_fit),
        Command::Evaluate(a) => (a, experiment::run_evaluate),
        Command::SweepAlpha(a) => (a, experiment::run_sweep),
        Command::OracleCheck(a) => (a, experiment::run_oracle_check),
    };
    run(&args.resolve()?)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(files) => {
            for file in files {
                println!("wrote {}", file.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
