//! Strategy decision from a table of published pairwise metrics.

use noiseopt::decision::{decide, PairVotes, ThresholdConfig};
use noiseopt::divergence::DivergenceReport;

fn main() -> noiseopt::Result<()> {
    let reports = [
        DivergenceReport::from_values((0, 1), 0.5867, 7.9755, 0.5052, -2.7003),
        DivergenceReport::from_values((0, 2), 0.8311, 15.1497, 0.9268, -2.6519),
        DivergenceReport::from_values((1, 2), 0.4711, 5.1161, 0.4224, -2.5194),
    ];
    let t = ThresholdConfig::default();
    for r in &reports {
        let v = PairVotes::of(r, &t)?;
        println!("pair ({}, {}): {:?} sum {:+}", r.device_a, r.device_b, v, v.sum());
    }
    let decision = decide(&reports, None, &t)?;
    for line in &decision.rationale {
        println!("{line}");
    }
    println!("=> {}", decision.strategy);

    // All metrics at zero: every pair converges.
    let zero: Vec<_> = [(0, 1), (0, 2), (1, 2)]
        .into_iter()
        .map(|p| DivergenceReport::from_values(p, 0.0, 0.0, 0.0, 0.0))
        .collect();
    println!("all-zero bundle => {}", decide(&zero, None, &t)?.strategy);
    Ok(())
}
