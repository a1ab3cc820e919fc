use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfgrad_cli::{exit, run, Command, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(
    name = "mfgrad",
    version,
    about = "Mean-field SDE simulation and gradient estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Solve the mean-field equation and write flows, moments and the Picard trace.
    Simulate(Common),
    /// Estimate ∇ₓE[Φ(X_T)] by BEL and/or finite differences.
    Gradient(Common),
    /// Regress mean squared path distances against time lag and initial distance.
    HolderScan(Common),
    /// Probe the drift's declared bound and Lipschitz constants.
    ValidateDrift(Common),
    /// Check that Φ is square integrable against the Gaussian weight.
    PhiCheck(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Sub::Simulate(c) => (Command::Simulate, c),
        Sub::Gradient(c) => (Command::Gradient, c),
        Sub::HolderScan(c) => (Command::HolderScan, c),
        Sub::ValidateDrift(c) => (Command::ValidateDrift, c),
        Sub::PhiCheck(c) => (Command::PhiCheck, c),
    };
    let config = match ExperimentConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("mfgrad: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let overrides = Overrides {
        seed: common.seed,
        out: common.out,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(k) = common.workers {
        if k == 0 {
            eprintln!("mfgrad: config error: `--workers` must be ≥ 1");
            return ExitCode::from(exit::CONFIG as u8);
        }
        pool = pool.num_threads(k);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("mfgrad: cannot start worker pool: {e}");
            return ExitCode::from(exit::IO as u8);
        }
    };
    match pool.install(|| run(command, config, &overrides)) {
        Ok(m) => {
            println!(
                "{}: wrote {} files (config {})",
                m.command,
                m.files.len(),
                &m.config_digest[..12]
            );
            ExitCode::from(exit::OK as u8)
        }
        Err(e) => {
            eprintln!("mfgrad: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
