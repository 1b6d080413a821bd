//! k-means on three device-like noise regimes, silhouette-based k and NMI.
//!
//! Each regime has its own mean weight and noise level, like the devices
//! of a heterogeneous fleet.

use noiseopt::clustering::{association, choose_k_points, kmeans_points, ClusteringConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> noiseopt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut points = Vec::new();
    let mut planted = Vec::new();
    for (label, (mean, sigma)) in [(19.0, 0.05), (20.0, 0.2), (21.5, 0.6)].into_iter().enumerate() {
        for _ in 0..25 {
            let mu = Normal::new(mean, 0.05).unwrap().sample(&mut rng);
            let s = sigma * Normal::new(1.0, 0.1).unwrap().sample(&mut rng);
            points.push(vec![mu, s, s * s]);
            planted.push(label);
        }
    }

    let cfg = ClusteringConfig::default();
    let fit = kmeans_points(&points, 3, 11, cfg.restarts, cfg.standardize)?;
    println!("k=3 inertia {:.3}, silhouette {:?}", fit.inertia, fit.silhouette);
    for c in &fit.centroids {
        println!("centroid mu {:.3} sigma {:.3}", c[0], c[1]);
    }
    let assoc = association(&fit.assignments, &planted)?;
    println!("NMI vs planted labels {:.3}, purity {:?}", assoc.nmi, assoc.purity);

    let choice = choose_k_points(&points, 6, 11, cfg.restarts, cfg.standardize)?;
    println!("silhouette picks k = {} ({:?})", choice.k, choice.scores);
    Ok(())
}
