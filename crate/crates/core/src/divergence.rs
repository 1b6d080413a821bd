//! Pairwise dissimilarity of per-device weight samples: Kolmogorov–Smirnov,
//! Kullback–Leibler, Wasserstein-1 and Bhattacharyya.
//!
//! KS and Wasserstein-1 are computed exactly from the empirical CDFs. KL and
//! Bhattacharyya need a shared histogram; see [`HistogramPolicy`].

use serde::{Deserialize, Serialize};

use crate::decision::PairVotes;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramPolicy {
    pub bins: usize,
    pub smoothing_eps: f64,
}

impl Default for HistogramPolicy {
    fn default() -> Self {
        Self {
            bins: 20,
            smoothing_eps: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    pub bin_edges: Vec<f64>,
    pub p_mass: Vec<f64>,
    pub q_mass: Vec<f64>,
    pub p_density: Vec<f64>,
    pub q_density: Vec<f64>,
}

impl HistogramPair {
    /// Builds a pair from explicit masses; densities are masses over bin
    /// widths. No smoothing is applied.
    pub fn from_masses(bin_edges: Vec<f64>, p_mass: Vec<f64>, q_mass: Vec<f64>) -> Result<Self> {
        if bin_edges.len() != p_mass.len() + 1 || p_mass.len() != q_mass.len() {
            return Err(Error::domain("histogram edge and mass lengths disagree"));
        }
        if bin_edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("histogram edges must increase strictly"));
        }
        if p_mass.iter().chain(&q_mass).any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::domain("histogram masses must be non-negative"));
        }
        let widths: Vec<f64> = bin_edges.windows(2).map(|w| w[1] - w[0]).collect();
        let p_density = p_mass.iter().zip(&widths).map(|(m, w)| m / w).collect();
        let q_density = q_mass.iter().zip(&widths).map(|(m, w)| m / w).collect();
        Ok(Self {
            bin_edges,
            p_mass,
            q_mass,
            p_density,
            q_density,
        })
    }
}

fn check_sample(name: &str, s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::domain(format!("{name} is empty")));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain(format!("{name} contains non-finite values")));
    }
    Ok(())
}

fn sorted(s: &[f64]) -> Vec<f64> {
    let mut v = s.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Walks the merged support of two sorted samples, calling `visit` with
/// each distinct value and both ECDF heights just after it.
fn walk_ecdfs(a: &[f64], b: &[f64], mut visit: impl FnMut(f64, f64, f64)) {
    let (la, lb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() || j < b.len() {
        let v = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        visit(v, i as f64 / la, j as f64 / lb);
    }
}

/// Two-sample KS statistic, the exact supremum of `|F_l - G_m|`.
pub fn ks_statistic(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    check_sample("sample_a", sample_a)?;
    check_sample("sample_b", sample_b)?;
    let (a, b) = (sorted(sample_a), sorted(sample_b));
    let mut d: f64 = 0.0;
    walk_ecdfs(&a, &b, |_, fa, fb| d = d.max((fa - fb).abs()));
    Ok(d)
}

/// Wasserstein-1 distance as the integral of `|P - Q|` over the merged
/// support; the ECDF difference is piecewise constant between support
/// points.
pub fn wasserstein1(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    check_sample("sample_a", sample_a)?;
    check_sample("sample_b", sample_b)?;
    let (a, b) = (sorted(sample_a), sorted(sample_b));
    let mut total = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    walk_ecdfs(&a, &b, |v, fa, fb| {
        if let Some((x0, gap)) = prev {
            total += gap * (v - x0);
        }
        prev = Some((v, (fa - fb).abs()));
    });
    Ok(total)
}

/// Shared equal-width bins over the combined range. Masses get `eps` added
/// per bin and are renormalized.
pub fn build_histogram_pair(
    sample_a: &[f64],
    sample_b: &[f64],
    bin_count: usize,
    smoothing_eps: f64,
) -> Result<HistogramPair> {
    check_sample("sample_a", sample_a)?;
    check_sample("sample_b", sample_b)?;
    if bin_count < 2 {
        return Err(Error::domain("bin_count must be at least 2"));
    }
    if !(smoothing_eps.is_finite() && smoothing_eps >= 0.0) {
        return Err(Error::domain("smoothing_eps must be non-negative"));
    }
    let (lo, hi) = sample_a
        .iter()
        .chain(sample_b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if hi <= lo {
        return Err(Error::DegenerateSample(
            "all values identical across both samples; histogram range has zero width".into(),
        ));
    }
    let width = (hi - lo) / bin_count as f64;
    let mut bin_edges: Vec<f64> = (0..bin_count).map(|i| lo + width * i as f64).collect();
    bin_edges.push(hi);

    let masses = |s: &[f64]| -> Vec<f64> {
        let mut counts = vec![0usize; bin_count];
        for &x in s {
            let idx = (((x - lo) / width).floor() as usize).min(bin_count - 1);
            counts[idx] += 1;
        }
        let n = s.len() as f64;
        let z = 1.0 + bin_count as f64 * smoothing_eps;
        counts
            .into_iter()
            .map(|c| (c as f64 / n + smoothing_eps) / z)
            .collect()
    };
    HistogramPair::from_masses(bin_edges, masses(sample_a), masses(sample_b))
}

/// `Σ p ln(p/q)` over the mass vectors. Terms with `p = 0` contribute 0; a
/// zero `q` under positive `p` yields `f64::INFINITY`.
pub fn kl_divergence(hist: &HistogramPair) -> f64 {
    kl_masses(&hist.p_mass, &hist.q_mass)
}

fn kl_masses(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi == 0.0 {
                0.0
            } else if qi == 0.0 {
                f64::INFINITY
            } else {
                pi * (pi / qi).ln()
            }
        })
        .sum()
}

/// KL with the roles of the two samples swapped.
pub fn kl_divergence_reverse(hist: &HistogramPair) -> f64 {
    kl_masses(&hist.q_mass, &hist.p_mass)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BhattacharyyaMode {
    /// Over probability masses; always `>= 0`.
    Mass,
    /// Over mass-per-width density heights; can be negative and depends on
    /// the measurement units through the bin width.
    Density,
}

pub fn bhattacharyya(hist: &HistogramPair, mode: BhattacharyyaMode) -> f64 {
    let (p, q) = match mode {
        BhattacharyyaMode::Mass => (&hist.p_mass, &hist.q_mass),
        BhattacharyyaMode::Density => (&hist.p_density, &hist.q_density),
    };
    let bc: f64 = p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum();
    let d = -bc.ln();
    // Identical masses give bc = 1 up to rounding.
    if mode == BhattacharyyaMode::Mass {
        d.max(0.0)
    } else {
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub device_a: usize,
    pub device_b: usize,
    pub ks: f64,
    /// Symmetrized KL: mean of both directions.
    pub kl: f64,
    pub kl_ab: f64,
    pub kl_ba: f64,
    pub wasserstein: f64,
    /// NaN when unknown; serialized as `null`.
    #[serde(default = "nan", deserialize_with = "null_as_nan")]
    pub bhattacharyya_mass: f64,
    pub bhattacharyya_density: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<PairVotes>,
}

fn nan() -> f64 {
    f64::NAN
}

fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl DivergenceReport {
    pub fn compute(
        (device_a, device_b): (usize, usize),
        sample_a: &[f64],
        sample_b: &[f64],
        policy: &HistogramPolicy,
    ) -> Result<Self> {
        let hist = build_histogram_pair(sample_a, sample_b, policy.bins, policy.smoothing_eps)?;
        let kl_ab = kl_divergence(&hist);
        let kl_ba = kl_divergence_reverse(&hist);
        Ok(Self {
            device_a,
            device_b,
            ks: ks_statistic(sample_a, sample_b)?,
            kl: 0.5 * (kl_ab + kl_ba),
            kl_ab,
            kl_ba,
            wasserstein: wasserstein1(sample_a, sample_b)?,
            bhattacharyya_mass: bhattacharyya(&hist, BhattacharyyaMode::Mass),
            bhattacharyya_density: bhattacharyya(&hist, BhattacharyyaMode::Density),
            votes: None,
        })
    }

    /// A report from already-known metric values (for instance published
    /// ones). The directional KL fields repeat the symmetrized value and the
    /// mass-mode Bhattacharyya is unknown (NaN).
    pub fn from_values(
        pair: (usize, usize),
        ks: f64,
        kl: f64,
        wasserstein: f64,
        bhattacharyya_density: f64,
    ) -> Self {
        Self {
            device_a: pair.0,
            device_b: pair.1,
            ks,
            kl,
            kl_ab: kl,
            kl_ba: kl,
            wasserstein,
            bhattacharyya_mass: f64::NAN,
            bhattacharyya_density,
            votes: None,
        }
    }
}

/// One report per unordered device pair `(i, j)`, `i < j`, in
/// lexicographic order.
pub fn pairwise_reports(
    samples: &[Vec<f64>],
    policy: &HistogramPolicy,
) -> Result<Vec<DivergenceReport>> {
    if samples.len() < 2 {
        return Err(Error::domain("pairwise metrics need at least 2 devices"));
    }
    if let Some(d) = samples.iter().position(|s| s.len() < 2) {
        return Err(Error::domain(format!(
            "device {d} has fewer than 2 measurements"
        )));
    }
    let mut out = Vec::with_capacity(samples.len() * (samples.len() - 1) / 2);
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            out.push(DivergenceReport::compute((i, j), &samples[i], &samples[j], policy)?);
        }
    }
    Ok(out)
}

/// Table-style CSV: one row per pair, one column per metric.
pub fn reports_to_csv(reports: &[DivergenceReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "device_a",
        "device_b",
        "ks",
        "kl",
        "kl_ab",
        "kl_ba",
        "wasserstein",
        "bhattacharyya_mass",
        "bhattacharyya_density",
    ])?;
    for r in reports {
        w.write_record([
            r.device_a.to_string(),
            r.device_b.to_string(),
            r.ks.to_string(),
            r.kl.to_string(),
            r.kl_ab.to_string(),
            r.kl_ba.to_string(),
            r.wasserstein.to_string(),
            r.bhattacharyya_mass.to_string(),
            r.bhattacharyya_density.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::domain(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
