//! Per-run noise summaries: replicate-group features, kernel density
//! estimates and box-plot five-number summaries.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, ParameterPoint, RepetitionMode};
use crate::error::{Error, Result};

pub const KDE_GRID_POINTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub device_id: usize,
    pub point: ParameterPoint,
    pub repetition_mode: RepetitionMode,
}

/// Mean, standard deviation and variance of one replicate group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFeature {
    pub run_key: RunKey,
    pub mu: f64,
    pub sigma: f64,
    pub var: f64,
    pub count: usize,
}

impl RunFeature {
    pub fn from_sample(run_key: RunKey, weights: &[f64]) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::domain("a run needs at least 2 replicates"));
        }
        let (mu, var) = mean_and_sample_variance(weights);
        let sigma = var.sqrt();
        Ok(Self {
            run_key,
            mu,
            sigma,
            var: sigma * sigma,
            count: weights.len(),
        })
    }

    pub fn vector(&self) -> [f64; 3] {
        [self.mu, self.sigma, self.var]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: Vec<RunFeature>,
}

impl FeatureMatrix {
    pub fn new(rows: Vec<RunFeature>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::NoQualifyingGroups);
        }
        Ok(Self { rows })
    }

    pub fn n_init(&self) -> usize {
        self.rows.len()
    }

    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.vector().to_vec()).collect()
    }

    pub fn device_labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.run_key.device_id).collect()
    }

    /// CSV with one row per run: key columns followed by the feature triple.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "device_id",
            "flow",
            "layer_height",
            "repetition_mode",
            "count",
            "mu",
            "sigma",
            "var",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.run_key.device_id.to_string(),
                r.run_key.point.flow.to_string(),
                r.run_key.point.layer_height.to_string(),
                r.run_key.repetition_mode.to_string(),
                r.count.to_string(),
                r.mu.to_string(),
                r.sigma.to_string(),
                r.var.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::domain(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Two-pass mean and sample variance (divisor `n - 1`).
pub fn mean_and_sample_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, ss / (n - 1.0))
}

pub fn sample_std(xs: &[f64]) -> f64 {
    mean_and_sample_variance(xs).1.sqrt()
}

/// Groups records into replicate runs keyed by (device, point, mode). Groups
/// with fewer than two replicates are skipped with a warning.
pub fn run_features(dataset: &Dataset) -> Result<FeatureMatrix> {
    type Key = (usize, u64, u64, RepetitionMode);
    let mut groups: BTreeMap<Key, (RunKey, Vec<f64>)> = BTreeMap::new();
    for r in &dataset.records {
        let key = (
            r.device_id,
            r.point.flow.to_bits(),
            r.point.layer_height.to_bits(),
            r.repetition_mode,
        );
        groups
            .entry(key)
            .or_insert_with(|| {
                (
                    RunKey {
                        device_id: r.device_id,
                        point: r.point,
                        repetition_mode: r.repetition_mode,
                    },
                    Vec::new(),
                )
            })
            .1
            .push(r.measured_weight);
    }
    let mut rows = Vec::with_capacity(groups.len());
    let mut skipped = 0usize;
    for (run_key, weights) in groups.into_values() {
        if weights.len() < 2 {
            skipped += 1;
            continue;
        }
        rows.push(RunFeature::from_sample(run_key, &weights)?);
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} replicate groups with fewer than 2 measurements");
    }
    FeatureMatrix::new(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "rule", content = "h")]
pub enum BandwidthRule {
    /// `h = s * m^(-1/5)`.
    #[default]
    Scott,
    /// `h = 0.9 * min(s, IQR / 1.34) * m^(-1/5)`.
    Silverman,
    Fixed(f64),
}

impl BandwidthRule {
    pub fn bandwidth(&self, sample: &[f64]) -> f64 {
        let m = sample.len() as f64;
        match *self {
            BandwidthRule::Scott => sample_std(sample) * m.powf(-0.2),
            BandwidthRule::Silverman => {
                let s = sample_std(sample);
                let mut sorted = sample.to_vec();
                sorted.sort_by(f64::total_cmp);
                let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
                let spread = if iqr > 0.0 { s.min(iqr / 1.34) } else { s };
                0.9 * spread * m.powf(-0.2)
            }
            BandwidthRule::Fixed(h) => h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeSummary {
    pub device_id: usize,
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

impl KdeSummary {
    /// Linear interpolation of the density on the grid; zero outside it.
    pub fn density_at(&self, x: f64) -> f64 {
        let (lo, hi) = (self.grid[0], self.grid[self.grid.len() - 1]);
        if x < lo || x > hi {
            return 0.0;
        }
        let step = (hi - lo) / (self.grid.len() - 1) as f64;
        let pos = (x - lo) / step;
        let i = (pos.floor() as usize).min(self.grid.len() - 2);
        let t = pos - i as f64;
        self.density[i] * (1.0 - t) + self.density[i + 1] * t
    }

    pub fn trapezoid_integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }
}

pub(crate) fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xw, yw)| 0.5 * (xw[1] - xw[0]) * (yw[0] + yw[1]))
        .sum()
}

/// Gaussian-kernel density over a 256-point grid spanning
/// `[min - 3h, max + 3h]`, rescaled so its trapezoid integral is 1.
pub fn kde(device_id: usize, weights: &[f64], rule: BandwidthRule) -> Result<KdeSummary> {
    if weights.len() < 2 {
        return Err(Error::DegenerateSample("KDE needs at least 2 points".into()));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::domain("KDE sample contains non-finite values"));
    }
    let h = rule.bandwidth(weights);
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::DegenerateSample(format!(
            "bandwidth {h} from a constant sample"
        )));
    }
    let (min, max) = weights
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| (lo.min(w), hi.max(w)));
    let (lo, hi) = (min - 3.0 * h, max + 3.0 * h);
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..KDE_GRID_POINTS).map(|i| lo + step * i as f64).collect();
    let norm = 1.0 / (weights.len() as f64 * h * (2.0 * PI).sqrt());
    let mut density: Vec<f64> = grid
        .iter()
        .map(|&x| {
            norm * weights
                .iter()
                .map(|&w| (-0.5 * ((x - w) / h).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    let area = trapezoid(&grid, &density);
    density.iter_mut().for_each(|d| *d /= area);
    Ok(KdeSummary {
        device_id,
        bandwidth: h,
        grid,
        density,
    })
}

/// KDE of every device's pooled weights in the dataset.
pub fn device_kdes(dataset: &Dataset, rule: BandwidthRule) -> Result<Vec<KdeSummary>> {
    (0..dataset.fleet_size)
        .map(|d| kde(d, &dataset.device_weights(d), rule))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WhiskerRule {
    /// Whiskers reach the sample extremes.
    MinMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub device_id: usize,
    pub repetition_mode: RepetitionMode,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_rule: WhiskerRule,
}

/// Quantile by linear interpolation between order statistics
/// (position `q * (n - 1)`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

pub fn five_numbers(values: &[f64]) -> [f64; 5] {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    [
        s[0],
        quantile_sorted(&s, 0.25),
        quantile_sorted(&s, 0.5),
        quantile_sorted(&s, 0.75),
        s[s.len() - 1],
    ]
}

/// Five-number summaries of run sigmas per (device, repetition mode).
pub fn box_summaries(features: &FeatureMatrix) -> Result<Vec<BoxSummary>> {
    if features.rows.is_empty() {
        return Err(Error::NoQualifyingGroups);
    }
    let mut groups: BTreeMap<(usize, RepetitionMode), Vec<f64>> = BTreeMap::new();
    for r in &features.rows {
        groups
            .entry((r.run_key.device_id, r.run_key.repetition_mode))
            .or_default()
            .push(r.sigma);
    }
    Ok(groups
        .into_iter()
        .map(|((device_id, repetition_mode), sigmas)| {
            let [min, q1, median, q3, max] = five_numbers(&sigmas);
            BoxSummary {
                device_id,
                repetition_mode,
                count: sigmas.len(),
                min,
                q1,
                median,
                q3,
                max,
                whisker_rule: WhiskerRule::MinMax,
            }
        })
        .collect())
}
