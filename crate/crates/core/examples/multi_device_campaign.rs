//! Homogeneous simulated fleet: pooled multi-task model with batch
//! proposals.

use noiseopt::acquisition::{propose_batch, AcquisitionSpec};
use noiseopt::campaign::{CampaignConfig, CampaignState, SimulatorOracle};
use noiseopt::simulator::FleetSimConfig;

fn main() -> noiseopt::Result<()> {
    let config = CampaignConfig {
        seed: 2,
        max_iterations: 3,
        ei_iterations: 3,
        ..Default::default()
    };
    let mut state = CampaignState::new(config)?;
    let mut oracle = SimulatorOracle::new(FleetSimConfig::preset_homogeneous(2))?;
    println!("decision: {}", state.prepare(&mut oracle)?);

    // Peek at the first batch before running it.
    let best = state.dataset.records.iter().map(|r| r.delta_w()).fold(f64::NEG_INFINITY, f64::max);
    let batch = propose_batch(
        &state.models[0],
        &state.config.bounds,
        &AcquisitionSpec::expected_improvement(best),
        &state.config.ga,
        state.config.fleet_size,
    )?;
    for p in &batch.assignments {
        println!("device {} -> {:?} (EI {:.2e})", p.device_id, p.point, p.acquisition_value);
    }

    state.run(&mut oracle, |_| Ok(()))?;
    for r in &state.log {
        println!(
            "iter {} device {} priority {}: predicted {:+.4} measured {:+.4}",
            r.iteration, r.device_id, r.priority, r.predicted_delta_w, r.delta_w
        );
    }
    Ok(())
}
