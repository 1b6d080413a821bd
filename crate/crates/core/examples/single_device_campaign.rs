//! Heterogeneous simulated fleet: noise analysis, decision and a short
//! independent campaign per device.

use noiseopt::campaign::{CampaignConfig, CampaignState, SimulatorOracle};
use noiseopt::simulator::FleetSimConfig;

fn main() -> noiseopt::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(6u32);
    let config = CampaignConfig {
        seed: 7,
        max_iterations: iterations,
        ei_iterations: iterations.min(11),
        ..Default::default()
    };
    let mut state = CampaignState::new(config)?;
    let mut oracle = SimulatorOracle::new(FleetSimConfig::preset_heterogeneous(7))?;

    let strategy = state.prepare(&mut oracle)?;
    println!("decision: {strategy}");
    state.run(&mut oracle, |s| {
        println!("iteration {} done", s.iteration());
        Ok(())
    })?;

    for d in 0..state.config.fleet_size {
        let series: Vec<String> = state
            .log
            .iter()
            .filter(|r| r.device_id == d)
            .map(|r| format!("{:.3}", r.delta_w))
            .collect();
        println!("device {d}: dW {}", series.join(" "));
        println!("  first |dW| <= 0.02 at iteration {:?}", state.first_hit(d, 0.02));
    }
    Ok(())
}
