use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sdewms::cli::{run, Command, RunConfig};

/// Tamed Milstein-type schemes for SDEs with Markovian switching.
#[derive(Parser)]
#[command(name = "sdewms", version, about)]
struct Cli {
    #[command(subcommand)]
    command: CommandArg,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (flat key = value format)
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if absent
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config's base seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's sample count
    #[arg(long)]
    samples: Option<usize>,
    /// Overwrite existing output files
    #[arg(long)]
    force: bool,
    /// Increase verbosity
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum CommandArg {
    /// Run the strong-convergence experiment; writes errors.csv and report.json
    Converge(CommonArgs),
    /// Simulate one trajectory; writes trajectory.csv
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// One-step map to drive
        #[arg(long, default_value = "tamed_milstein")]
        scheme: String,
    },
    /// Jump-count and moment diagnostics; writes diagnostics.json
    Diagnose(CommonArgs),
    /// Full vs ablated Milstein on one coupled run; writes ablation.json
    Ablate(CommonArgs),
    /// Sampled assumption checks, commutativity residual, Jacobian check
    Validate(CommonArgs),
}

fn to_run_config(command: Command, common: CommonArgs, scheme: Option<String>) -> RunConfig {
    RunConfig {
        command,
        config_path: common.config,
        out_dir: common.out,
        seed_override: common.seed,
        samples_override: common.samples,
        force: common.force,
        scheme,
        verbosity: common.verbose,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let rc = match cli.command {
        CommandArg::Converge(c) => to_run_config(Command::Converge, c, None),
        CommandArg::Simulate { common, scheme } => {
            to_run_config(Command::Simulate, common, Some(scheme))
        }
        CommandArg::Diagnose(c) => to_run_config(Command::Diagnose, c, None),
        CommandArg::Ablate(c) => to_run_config(Command::Ablate, c, None),
        CommandArg::Validate(c) => to_run_config(Command::Validate, c, None),
    };
    match run(&rc) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
