mod error;
mod io;
mod plot;
mod tools;
mod train;

use clap::{Parser, Subcommand};

use crate::error::Result;

/// Mean-field games and trajectory-regularized normalizing flows.
///
/// Presets: ot8gauss, crowd, multigroup-2d-2p, multigroup-3d-2p,
/// multigroup-2d-8p, nf-synthetic[-s-shape|-swiss|-two-gauss|-spiral],
/// nf-tabular-sample.
#[derive(Debug, Parser)]
#[command(name = "mfgflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a mean-field game preset.
    Mfg(train::TrainArgs),
    /// Train a transport-regularized density estimator.
    Nf(train::TrainArgs),
    /// Per-layer Lipschitz bounds of a checkpointed flow.
    Lipschitz(tools::LipschitzArgs),
    /// Exact discrete OT, equal-spacing KKT, or Gaussian W2.
    Oracle(tools::OracleArgs),
    /// Finite-difference gradient checks.
    Gradcheck(tools::GradcheckArgs),
    /// Convergence order of the discretized transport cost.
    Probe(tools::ProbeArgs),
    /// Render trajectory/density CSVs to SVG.
    Plot(plot::PlotArgs),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Mfg(a) => train::run_mfg(&a),
        Command::Nf(a) => train::run_nf(&a),
        Command::Lipschitz(a) => tools::run_lipschitz(&a),
        Command::Oracle(a) => tools::run_oracle(&a),
        Command::Gradcheck(a) => tools::run_gradcheck(&a),
        Command::Probe(a) => tools::run_probe(&a),
        Command::Plot(a) => plot::run_plot(&a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}
