//! Shared fixtures for the criterion benches.

use chmm_core::model::{CouplingParams, EmissionMode};
use chmm_core::simulate::{block_kinship, simulate, EmissionScenario, SimulationConfig, SimulatedDataset};

/// A reproducible simulated panel in the study design's geometry.
pub fn panel(n_individuals: usize, n_loci: usize, sigma: f64, seed: u64) -> SimulatedDataset {
    let similarity = block_kinship(n_individuals, 2, 0.8, 0.1).expect("kinship");
    let config = SimulationConfig::new(
        n_individuals,
        n_loci,
        EmissionScenario::Homoscedastic { sigma },
        -0.2,
        similarity,
        seed,
    );
    simulate(&config).expect("simulate")
}

/// Default-initialized parameters for a panel.
pub fn init_for(
    data: &SimulatedDataset,
    log_omega: f64,
) -> chmm_core::model::ModelParams {
    chmm_core::model::initial_params(
        &data.observations,
        3,
        EmissionMode::Homoscedastic,
        data.config.similarity.clone(),
        CouplingParams::new(log_omega).expect("coupling"),
    )
    .expect("init")
}
