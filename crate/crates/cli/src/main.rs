use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "syncrds", version, about = "Weak-synchronization experiments for order-preserving random dynamical systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML experiment file.
    config: PathBuf,
    /// Override a config value, e.g. `--set noise.seed=7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the diagnostic named in `diagnostic.kind`.
    Run(RunArgs),
    /// Record one forward trajectory.
    Simulate(RunArgs),
    /// Pullback images and attractor spread over several horizons.
    Pullback(RunArgs),
    /// Synchronization probability curve.
    SyncCurve(RunArgs),
    /// Equilibrium cloud diameters (pushforward or Cesaro).
    Equilibrium(RunArgs),
    /// Held-out coverage of a fitted order interval.
    IntervalCheck(RunArgs),
    /// Interval seminorm growth for the dual order.
    NormalityProbe(RunArgs),
    /// Order preservation over random ordered pairs.
    OrderCheck(RunArgs),
    /// Two-start and pullback-versus-forward law distances.
    MixingCheck(RunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, kind) = match cli.command {
        Command::Run(a) => (a, None),
        Command::Simulate(a) => (a, Some("simulate")),
        Command::Pullback(a) => (a, Some("pullback")),
        Command::SyncCurve(a) => (a, Some("sync-curve")),
        Command::Equilibrium(a) => (a, Some("equilibrium")),
        Command::IntervalCheck(a) => (a, Some("interval-check")),
        Command::NormalityProbe(a) => (a, Some("normality-probe")),
        Command::OrderCheck(a) => (a, Some("order-check")),
        Command::MixingCheck(a) => (a, Some("mixing-check")),
    };
    std::panic::set_hook(Box::new(|_| {}));
    let result = std::panic::catch_unwind(|| syncrds_cli::execute(&args.config, &args.overrides, kind));
    match result {
        Ok(Ok(dir)) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("syncrds: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => {
            eprintln!("syncrds: internal error while running the experiment");
            ExitCode::from(3)
        }
    }
}
