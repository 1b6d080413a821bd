//! K-means over run features, silhouette-based choice of `k` and the
//! association between cluster labels and devices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::FeatureMatrix;

pub const MAX_LLOYD_ITERATIONS: usize = 300;
pub const WEAK_STRUCTURE_SILHOUETTE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    pub restarts: usize,
    /// Z-score each feature dimension before clustering. Disable to cluster
    /// the raw `(mu, sigma, var)` triples.
    pub standardize: bool,
    /// Fleets up to this size cluster with `k = n`; larger fleets choose `k`
    /// by silhouette.
    pub k_equals_n_up_to: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            standardize: true,
            k_equals_n_up_to: 5,
        }
    }
}

/// Per-dimension affine map into clustering space. Dimensions with zero
/// spread are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub kept: Vec<usize>,
}

impl Scaling {
    pub fn fit(points: &[Vec<f64>], standardize: bool) -> Self {
        let d = points[0].len();
        let n = points.len() as f64;
        let mut mean = vec![0.0; d];
        let mut scale = vec![1.0; d];
        let mut kept = Vec::with_capacity(d);
        for j in 0..d {
            let m = points.iter().map(|p| p[j]).sum::<f64>() / n;
            let s = (points.iter().map(|p| (p[j] - m).powi(2)).sum::<f64>() / n).sqrt();
            if s <= 1e-12 * m.abs().max(1.0) {
                log::warn!("feature dimension {j} has zero variance and is dropped");
                mean[j] = m;
                continue;
            }
            kept.push(j);
            if standardize {
                mean[j] = m;
                scale[j] = s;
            }
        }
        if !standardize {
            // Raw clustering still drops constant dimensions but does not
            // centre the rest.
            for &j in &kept {
                mean[j] = 0.0;
            }
        }
        Self { mean, scale, kept }
    }

    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        self.kept
            .iter()
            .map(|&j| (p[j] - self.mean[j]) / self.scale[j])
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (zi, &j) in z.iter().zip(&self.kept) {
            out[j] = zi * self.scale[j] + self.mean[j];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub k: usize,
    pub assignments: Vec<usize>,
    /// Centroids mapped back to the raw feature space.
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to assigned centroids, in clustering space.
    pub inertia: f64,
    pub silhouette: Option<f64>,
    pub seed: u64,
    pub restarts: usize,
    pub iterations: usize,
    /// Inertia after every Lloyd update of the winning restart.
    pub inertia_history: Vec<f64>,
    pub scaling: Scaling,
}

impl ClusteringResult {
    pub fn recompute_inertia(&self, points: &[Vec<f64>]) -> f64 {
        let z: Vec<Vec<f64>> = points.iter().map(|p| self.scaling.apply(p)).collect();
        let centroids: Vec<Vec<f64>> = self.centroids.iter().map(|c| self.scaling.apply(c)).collect();
        z.iter()
            .zip(&self.assignments)
            .map(|(p, &l)| sq_dist(p, &centroids[l]))
            .sum()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centroids.push(points[idx].clone());
        let newest = centroids.last().expect("just pushed");
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, newest));
        }
    }
    centroids
}

struct LloydRun {
    assignments: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
    history: Vec<f64>,
    iterations: usize,
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> LloydRun {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        // Update step, re-seeding empty clusters with the point farthest
        // from its current centroid.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&assignments) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&i, &j| {
                        sq_dist(&points[i], &centroids[assignments[i]])
                            .total_cmp(&sq_dist(&points[j], &centroids[assignments[j]]))
                            .then(j.cmp(&i))
                    });
                if let Some(i) = far {
                    let old = assignments[i];
                    counts[old] -= 1;
                    counts[c] = 1;
                    assignments[i] = c;
                    centroids[c] = points[i].clone();
                    let members: Vec<&Vec<f64>> = points
                        .iter()
                        .zip(&assignments)
                        .filter(|(_, &l)| l == old)
                        .map(|(p, _)| p)
                        .collect();
                    centroids[old] = (0..dim)
                        .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                        .collect();
                }
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &l)| sq_dist(p, &centroids[l]))
            .sum();
        history.push(inertia);

        let next: Vec<usize> = points
            .iter()
            .zip(&assignments)
            .map(|(p, &cur)| {
                let (best, d) = nearest(p, &centroids);
                // Keep the current label on exact ties.
                if sq_dist(p, &centroids[cur]) <= d {
                    cur
                } else {
                    best
                }
            })
            .collect();
        if next == assignments || iterations >= MAX_LLOYD_ITERATIONS {
            return LloydRun {
                assignments,
                centroids,
                inertia,
                history,
                iterations,
            };
        }
        assignments = next;
    }
}

/// K-means with k-means++ seeding on arbitrary points; best of `restarts`
/// runs by inertia (ties to the earlier restart).
pub fn kmeans_points(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    restarts: usize,
    standardize: bool,
) -> Result<ClusteringResult> {
    if points.is_empty() {
        return Err(Error::domain("no points to cluster"));
    }
    if k == 0 || k > points.len() {
        return Err(Error::domain(format!(
            "k = {k} must lie in [1, {}]",
            points.len()
        )));
    }
    if restarts == 0 {
        return Err(Error::domain("restarts must be at least 1"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::domain("features must be finite"));
    }
    let scaling = Scaling::fit(points, standardize);
    let z: Vec<Vec<f64>> = points.iter().map(|p| scaling.apply(p)).collect();

    let mut best: Option<LloydRun> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let run = if z[0].is_empty() {
            LloydRun {
                assignments: vec![0; z.len()],
                centroids: vec![Vec::new(); k],
                inertia: 0.0,
                history: vec![0.0],
                iterations: 0,
            }
        } else {
            lloyd(&z, kmeans_plus_plus(&z, k, &mut rng))
        };
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("restarts >= 1");
    let silhouette = if k >= 2 {
        silhouette_points(&z, &best.assignments).ok()
    } else {
        None
    };
    Ok(ClusteringResult {
        k,
        centroids: best.centroids.iter().map(|c| scaling.invert(c)).collect(),
        assignments: best.assignments,
        inertia: best.inertia,
        silhouette,
        seed,
        restarts,
        iterations: best.iterations,
        inertia_history: best.history,
        scaling,
    })
}

pub fn kmeans(
    features: &FeatureMatrix,
    k: usize,
    seed: u64,
    config: &ClusteringConfig,
) -> Result<ClusteringResult> {
    kmeans_points(&features.vectors(), k, seed, config.restarts, config.standardize)
}

/// Mean silhouette with Euclidean distance. A point alone in its cluster
/// scores 0.
pub fn silhouette_points(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::domain("points and labels differ in length"));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if k < 2 || sizes.contains(&0) {
        return Err(Error::domain(
            "silhouette needs at least 2 clusters, all non-empty",
        ));
    }
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += sq_dist(&points[i], &points[j]).sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Silhouette of `assignments` over the features in the same space
/// clustering used.
pub fn silhouette_score(
    features: &FeatureMatrix,
    assignments: &[usize],
    standardize: bool,
) -> Result<f64> {
    let raw = features.vectors();
    let scaling = Scaling::fit(&raw, standardize);
    let z: Vec<Vec<f64>> = raw.iter().map(|p| scaling.apply(p)).collect();
    silhouette_points(&z, assignments)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KChoice {
    pub k: usize,
    pub silhouette: f64,
    pub weak_structure: bool,
    /// `(k, silhouette)` for every candidate.
    pub scores: Vec<(usize, f64)>,
}

/// Argmax of silhouette over `k in [2, k_max]`, ties to the smaller `k`.
pub fn choose_k_points(
    points: &[Vec<f64>],
    k_max: usize,
    seed: u64,
    restarts: usize,
    standardize: bool,
) -> Result<KChoice> {
    if k_max < 2 || k_max > points.len() {
        return Err(Error::domain(format!(
            "k_max = {k_max} must lie in [2, {}]",
            points.len()
        )));
    }
    let mut scores = Vec::new();
    for k in 2..=k_max {
        let r = kmeans_points(points, k, seed, restarts, standardize)?;
        scores.push((k, r.silhouette.unwrap_or(f64::NEG_INFINITY)));
    }
    let (k, silhouette) = scores
        .iter()
        .copied()
        .fold((0, f64::NEG_INFINITY), |acc, (k, s)| if s > acc.1 { (k, s) } else { acc });
    Ok(KChoice {
        k,
        silhouette,
        weak_structure: silhouette < WEAK_STRUCTURE_SILHOUETTE,
        scores,
    })
}

pub fn choose_k(features: &FeatureMatrix, k_max: usize, seed: u64, config: &ClusteringConfig) -> Result<KChoice> {
    choose_k_points(&features.vectors(), k_max, seed, config.restarts, config.standardize)
}

/// Fleet-level `k`: the fleet size for small fleets, silhouette choice
/// otherwise.
pub fn campaign_k(features: &FeatureMatrix, fleet_size: usize, seed: u64, config: &ClusteringConfig) -> Result<usize> {
    let k = if fleet_size <= config.k_equals_n_up_to {
        fleet_size
    } else {
        choose_k(features, fleet_size.min(features.n_init()), seed, config)?.k
    };
    Ok(k.min(features.n_init()).max(1))
}

/// Inertia for every `k in [1, k_max]`, for elbow plots.
pub fn elbow_curve(features: &FeatureMatrix, k_max: usize, seed: u64, config: &ClusteringConfig) -> Result<Vec<(usize, f64)>> {
    (1..=k_max.min(features.n_init()))
        .map(|k| kmeans(features, k, seed, config).map(|r| (k, r.inertia)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationReport {
    /// `counts[device][cluster]`.
    pub counts: Vec<Vec<usize>>,
    pub purity: Vec<f64>,
    pub nmi: f64,
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Device–cluster contingency, per-device purity and NMI with arithmetic
/// mean normalization. Two trivial labelings score NMI 1.
pub fn association(assignments: &[usize], device_labels: &[usize]) -> Result<AssociationReport> {
    if assignments.len() != device_labels.len() {
        return Err(Error::domain("assignments and device labels differ in length"));
    }
    if assignments.is_empty() {
        return Err(Error::domain("association over an empty labeling"));
    }
    let k = assignments.iter().max().expect("non-empty") + 1;
    let n_dev = device_labels.iter().max().expect("non-empty") + 1;
    let mut counts = vec![vec![0usize; k]; n_dev];
    for (&c, &d) in assignments.iter().zip(device_labels) {
        counts[d][c] += 1;
    }
    let purity = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                *row.iter().max().expect("k >= 1") as f64 / total as f64
            }
        })
        .collect();

    let n = assignments.len() as f64;
    let dev_tot: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
    let clu_tot: Vec<usize> = (0..k).map(|c| counts.iter().map(|r| r[c]).sum()).collect();
    let h_dev = entropy(&dev_tot, n);
    let h_clu = entropy(&clu_tot, n);
    let nmi = if h_dev == 0.0 && h_clu == 0.0 {
        1.0
    } else {
        let mut mi = 0.0;
        for (d, row) in counts.iter().enumerate() {
            for (c, &nij) in row.iter().enumerate() {
                if nij > 0 {
                    let nij = nij as f64;
                    mi += nij / n * (n * nij / (dev_tot[d] as f64 * clu_tot[c] as f64)).ln();
                }
            }
        }
        let denom = 0.5 * (h_dev + h_clu);
        if denom > 0.0 {
            (mi / denom).clamp(0.0, 1.0)
        } else {
            0.0
        }
    };
    Ok(AssociationReport { counts, purity, nmi })
}

/// One CSV row per run: raw features, cluster label and device.
pub fn rows_to_csv(features: &FeatureMatrix, result: &ClusteringResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["device_id", "mu", "sigma", "var", "cluster"])?;
    for (r, l) in features.rows.iter().zip(&result.assignments) {
        w.write_record([
            r.run_key.device_id.to_string(),
            r.mu.to_string(),
            r.sigma.to_string(),
            r.var.to_string(),
            l.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::domain(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
