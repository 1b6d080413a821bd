//! Run features, KDEs and box summaries for a simulated initial design.

use noiseopt::campaign::{CampaignConfig, CampaignState, SimulatorOracle};
use noiseopt::simulator::FleetSimConfig;
use noiseopt::stats::{box_summaries, device_kdes, run_features, BandwidthRule};

fn main() -> noiseopt::Result<()> {
    let mut state = CampaignState::new(CampaignConfig { seed: 3, ..Default::default() })?;
    let mut oracle = SimulatorOracle::new(FleetSimConfig::preset_heterogeneous(3))?;
    state.run_initial_design(&mut oracle)?;

    let features = run_features(&state.dataset)?;
    println!("{} replicate groups", features.rows.len());
    for row in features.rows.iter().take(4) {
        println!("{:?} -> mu {:.3}, sigma {:.4}, var {:.6}", row.run_key, row.mu, row.sigma, row.var);
    }

    for k in device_kdes(&state.dataset, BandwidthRule::Scott)? {
        let (i, peak) = k
            .density
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        println!(
            "device {}: bandwidth {:.4}, mode near {:.3} g (density {:.2}), integral {:.4}",
            k.device_id,
            k.bandwidth,
            k.grid[i],
            peak,
            k.trapezoid_integral()
        );
    }

    for b in box_summaries(&features)? {
        println!(
            "device {} {:?}: n={} median sigma {:.4} [{:.4}, {:.4}]",
            b.device_id, b.repetition_mode, b.count, b.median, b.q1, b.q3
        );
    }
    Ok(())
}
