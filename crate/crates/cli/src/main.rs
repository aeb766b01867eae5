use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pairsource_cli::{
    run_scenario, write_output, CliError, LoadedConfig, RunOptions, Scenario, CONFIG_ENV, EXIT_CONFIG, EXIT_OK,
};

/// Simulates a pulsed crossed-crystal entangled photon-pair source.
#[derive(Debug, Parser)]
#[command(name = "pairsource", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, env = CONFIG_ENV)]
    config: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write its output directory.
    #[command(flatten)]
    Run(RunCommand),
    /// Check a config file without running anything.
    Validate(Common),
}

#[derive(Debug, Subcommand)]
enum RunCommand {
    Fringe(RunArgs),
    Chsh(RunArgs),
    Tomography(RunArgs),
    PowerScan(RunArgs),
    Brightness(RunArgs),
    Hom(RunArgs),
    Qpm(RunArgs),
    Compensation(RunArgs),
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: runs/<scenario>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Expected values instead of sampled counts.
    #[arg(long)]
    exact: bool,
    /// Simulated laser pulses (brightness, power-scan).
    #[arg(long)]
    pulses: Option<u64>,
    /// Monte-Carlo runs for tomography errors.
    #[arg(long)]
    mc_runs: Option<usize>,
}

impl RunCommand {
    fn split(self) -> (Scenario, RunArgs) {
        match self {
            RunCommand::Fringe(a) => (Scenario::Fringe, a),
            RunCommand::Chsh(a) => (Scenario::Chsh, a),
            RunCommand::Tomography(a) => (Scenario::Tomography, a),
            RunCommand::PowerScan(a) => (Scenario::PowerScan, a),
            RunCommand::Brightness(a) => (Scenario::Brightness, a),
            RunCommand::Hom(a) => (Scenario::Hom, a),
            RunCommand::Qpm(a) => (Scenario::Qpm, a),
            RunCommand::Compensation(a) => (Scenario::Compensation, a),
        }
    }
}

fn run(cmd: RunCommand) -> Result<String, CliError> {
    let (scenario, args) = cmd.split();
    let cfg = LoadedConfig::load(&args.common.config)?;
    let opts = RunOptions {
        seed: args.seed,
        exact: args.exact,
        pulses: args.pulses,
        mc_runs: args.mc_runs,
    };
    let out = run_scenario(scenario, &cfg, &opts)?;
    let dir = args.out.unwrap_or_else(|| PathBuf::from("runs").join(scenario.name()));
    write_output(&dir, &cfg, &out)?;
    Ok(out.headline)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate(c) => {
            let report = match LoadedConfig::load(&c.config) {
                Ok(cfg) => cfg.validate(),
                Err(report) => report,
            };
            print!("{report}");
            ExitCode::from(if report.is_valid() { EXIT_OK } else { EXIT_CONFIG })
        }
        Command::Run(cmd) => match run(cmd) {
            Ok(headline) => {
                println!("{headline}");
                ExitCode::from(EXIT_OK)
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code())
            }
        },
    }
}
