//! Pairwise KS, Wasserstein, KL and Bhattacharyya between two samples.

use noiseopt::divergence::{
    bhattacharyya, build_histogram_pair, kl_divergence, ks_statistic, wasserstein1, BhattacharyyaMode,
    DivergenceReport, HistogramPolicy,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn sample(mean: f64, sd: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(mean, sd).unwrap();
    (0..n).map(|_| d.sample(&mut rng)).collect()
}

fn main() -> noiseopt::Result<()> {
    let a = sample(20.0, 0.1, 75, 1);
    let b = sample(20.3, 0.3, 75, 2);
    let policy = HistogramPolicy::default();

    println!("KS = {:.4}", ks_statistic(&a, &b)?);
    println!("W1 = {:.4}", wasserstein1(&a, &b)?);
    let hist = build_histogram_pair(&a, &b, policy.bins, policy.smoothing_eps)?;
    println!("KL(a||b) = {:.4}", kl_divergence(&hist));
    println!("B (mass) = {:.4}", bhattacharyya(&hist, BhattacharyyaMode::Mass));
    println!("B (density) = {:.4}", bhattacharyya(&hist, BhattacharyyaMode::Density));

    let report = DivergenceReport::compute((0, 1), &a, &b, &policy)?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    // Identical samples: every distance vanishes.
    let same = DivergenceReport::compute((0, 0), &a, &a, &policy)?;
    println!("self: ks {} w {} kl {:.2e}", same.ks, same.wasserstein, same.kl);
    Ok(())
}
