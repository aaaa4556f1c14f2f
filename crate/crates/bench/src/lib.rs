//! Experiment harness: configuration, seeded execution and CSV output for
//! the gradient-cloud and mixture experiments.

pub mod cloud;
pub mod config;
pub mod mixture;
pub mod output;

use config::{ExperimentConfig, ExperimentId};
use output::Table;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] sgrgmm::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Runs the configured experiment and returns its tables in write order.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<Table>, RunError> {
    Ok(match cfg.experiment {
        ExperimentId::ContaminationSweep => cloud::contamination_sweep(cfg)?.tables(),
        ExperimentId::OuterLoop => cloud::outer_loop(cfg)?.tables(),
        ExperimentId::EpsilonSensitivity => cloud::epsilon_sensitivity(cfg)?.tables(&cfg.sensitivity.assumed),
        ExperimentId::DgmmDiagnostics => mixture::dgmm_diagnostics(cfg)?.tables(cfg.mixture.orders),
        ExperimentId::DgmmTrials => mixture::dgmm_trials(cfg)?.tables(),
        ExperimentId::BaselineComparison => mixture::baseline_comparison(cfg)?.tables(),
    })
}
