use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynid::Error;
use dynid_cli::{
    cmd_evaluate, cmd_generate, cmd_report, cmd_simulate, cmd_train, ExperimentConfig, Preset,
    ResolvedConfig, SimMode,
};

/// Identify governing equations from noisy, partially observed trajectories.
#[derive(Parser)]
#[command(name = "dynid", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (flat JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seed override (wins over the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for inputs and outputs (wins over the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scale preset filling unset config values.
    #[arg(long, default_value = "desk")]
    preset: Preset,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize train/test datasets with observations and provenance.
    Generate(Common),
    /// Train the configured model on the generated training data.
    Train(Common),
    /// Score the trained checkpoint on the test dataset.
    Evaluate(Common),
    /// Roll trajectories out of a checkpoint for plotting.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Integration steps per trajectory.
        #[arg(long, default_value_t = 20000)]
        steps: usize,
        /// Number of trajectories.
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// deterministic | stochastic
        #[arg(long, default_value = "deterministic")]
        mode: SimMode,
    },
    /// Render the stored evaluation report as the benchmark-table row.
    Report(Common),
}

fn resolve(common: &Common) -> Result<(ResolvedConfig, PathBuf), Error> {
    let cfg = ExperimentConfig::from_file(&common.config)?;
    let rc = cfg.resolve(common.preset, common.seed)?;
    let out = match (&common.out, &cfg.out_dir) {
        (Some(flag), _) => flag.clone(),
        (None, Some(dir)) => PathBuf::from(dir),
        (None, None) => {
            return Err(Error::validation(
                "no output directory: pass --out or set 'out_dir' in the config",
            ))
        }
    };
    Ok((rc, out))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(c) => {
            let (rc, out) = resolve(&c)?;
            cmd_generate(&rc, &out)
        }
        Command::Train(c) => {
            let (rc, out) = resolve(&c)?;
            cmd_train(&rc, &out).map(|_| ())
        }
        Command::Evaluate(c) => {
            let (rc, out) = resolve(&c)?;
            cmd_evaluate(&rc, &out).map(|_| ())
        }
        Command::Simulate { common, steps, runs, mode } => {
            let (rc, out) = resolve(&common)?;
            cmd_simulate(&rc, &out, steps, runs, mode)
        }
        Command::Report(c) => {
            let (rc, out) = resolve(&c)?;
            let table = cmd_report(&rc, &out)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Validation(_) => "validation",
        Error::Computation(_) => "computation",
        Error::Io(_) => "io",
        Error::Format(_) => "format",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({
                "error": e.to_string(),
                "kind": error_kind(&e),
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
