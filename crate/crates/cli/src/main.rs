use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use hystereact_cli::config::{ExperimentConfig, Kind};
use hystereact_cli::run::{execute, exit_code, write_outputs};

/// Run a reaction-diffusion hysteresis experiment.
#[derive(Debug, Parser)]
#[command(name = "hystereact", version)]
struct Cli {
    /// simulate, slowfast, verify-branch, sweep, compare or kernel-check
    kind: Kind,
    /// JSON experiment configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output.dir` or the current directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps and comparisons
    #[arg(long, env = "HYSTEREACT_JOBS")]
    jobs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cfg, bytes) = match ExperimentConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", cli.config.display());
            return ExitCode::from(1);
        }
    };
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let outcome = match execute(cli.kind, &cfg, jobs) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let dir = cli
        .out
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    if let Err(e) = write_outputs(&dir, cli.kind, &cfg, &bytes, &outcome) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    eprintln!("{}: {}", cli.kind, outcome.status.as_str());
    ExitCode::from(exit_code(outcome.status) as u8)
}
