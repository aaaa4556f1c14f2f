use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use sgrgmm_bench::config::{ExperimentConfig, ExperimentId, Overrides};
use sgrgmm_bench::output::write_all;

/// Reproducible robust-estimation experiments.
#[derive(Debug, Parser)]
#[command(name = "sgrgmm", version)]
struct Cli {
    command: ExperimentId,
    /// TOML experiment file; its `experiment` key must match the command.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Fewer trials and DGMM steps.
    #[arg(long)]
    fast: bool,
}

const CONFIG_ERROR: u8 = 2;
const RUN_ERROR: u8 = 1;

fn load(cli: &Cli) -> Result<ExperimentConfig, String> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| e.to_string())?,
        None => ExperimentConfig::new(cli.command),
    };
    if cfg.experiment != cli.command {
        return Err(format!("config describes {} but the command is {}", cfg.experiment, cli.command));
    }
    let ov = Overrides { seed: cli.seed, trials: cli.trials, fast: cli.fast };
    cfg.resolve(&ov).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(CONFIG_ERROR);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    let tables = match sgrgmm_bench::run(&cfg) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {} failed: {e}", cfg.experiment);
            return ExitCode::from(RUN_ERROR);
        }
    };
    if let Err(e) = write_all(&cli.out, &cfg, &tables) {
        eprintln!("error: cannot write to {}: {e}", cli.out.display());
        return ExitCode::from(RUN_ERROR);
    }
    if let Some(first) = tables.first() {
        print!("{}", first.render());
    }
    eprintln!("wrote {} tables to {}", tables.len(), cli.out.display());
    ExitCode::SUCCESS
}
