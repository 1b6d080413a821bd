//! The virtual printer fleet: presets, noise-free response and draws.

use noiseopt::domain::{ParameterPoint, RepetitionMode};
use noiseopt::simulator::{simulate_measurement, FleetSimConfig};

fn main() -> noiseopt::Result<()> {
    let fleet = FleetSimConfig::preset_heterogeneous(42);
    let mid = ParameterPoint::new(3000.0, 0.4);
    for d in 0..fleet.len() {
        let draws: Vec<String> = (0..5)
            .map(|k| simulate_measurement(&fleet, d, mid, RepetitionMode::Simultaneous, k).map(|w| format!("{w:.3}")))
            .collect::<noiseopt::Result<_>>()?;
        println!("device {d}: mean {:.3} g, draws {}", fleet.mean_weight(d, mid)?, draws.join(" "));
    }
    let seq = simulate_measurement(&fleet, 2, mid, RepetitionMode::Sequential, 0)?;
    println!("device 2 sequential draw {seq:.3} g (noise x{})", fleet.devices[2].mode_factor);
    println!("{}", serde_json::to_string_pretty(&FleetSimConfig::preset_homogeneous(0))?);
    Ok(())
}
