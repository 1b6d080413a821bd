//! Turns pairwise divergence reports and clustering association into a
//! single- vs multi-device strategy.
//!
//! Each metric votes High (+1), Low (-1) or Indeterminate (0). A pair is
//! Divergent when its vote sum is positive and Convergent when negative.
//! The fleet goes single-device when a strict majority of pairs diverge and
//! multi-device when a strict majority converge. Otherwise the decision is
//! Indeterminate unless the cluster/device NMI exceeds `nmi_high`, in which
//! case it resolves to single-device.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clustering::AssociationReport;
use crate::divergence::DivergenceReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub ks_high: f64,
    pub ks_low: f64,
    pub kl_high: f64,
    pub kl_low: f64,
    pub w_high: f64,
    pub w_low: f64,
    /// Density-mode Bhattacharyya below this value votes High.
    pub b_high_divergence: f64,
    pub nmi_high: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            ks_high: 0.5,
            ks_low: 0.2,
            kl_high: 5.0,
            kl_low: 2.0,
            w_high: 0.4,
            w_low: 0.2,
            b_high_divergence: -2.0,
            nmi_high: 0.5,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lo, hi) in [
            ("ks", self.ks_low, self.ks_high),
            ("kl", self.kl_low, self.kl_high),
            ("wasserstein", self.w_low, self.w_high),
        ] {
            if !(lo < hi) {
                return Err(Error::domain(format!("{name} low threshold must be below high")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    Ks,
    Kl,
    Wasserstein,
    Bhattacharyya,
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ks" => Ok(MetricId::Ks),
            "kl" => Ok(MetricId::Kl),
            "w" | "wasserstein" => Ok(MetricId::Wasserstein),
            "b" | "bhattacharyya" => Ok(MetricId::Bhattacharyya),
            other => Err(Error::domain(format!("unknown metric id {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    High,
    Low,
    Indeterminate,
}

impl Vote {
    pub fn value(self) -> i32 {
        match self {
            Vote::High => 1,
            Vote::Low => -1,
            Vote::Indeterminate => 0,
        }
    }
}

pub fn metric_vote(metric: MetricId, value: f64, t: &ThresholdConfig) -> Result<Vote> {
    if !value.is_finite() {
        return Err(Error::domain(format!("{metric:?} value {value} is not finite")));
    }
    let banded = |hi: f64, lo: f64| {
        if value > hi {
            Vote::High
        } else if value < lo {
            Vote::Low
        } else {
            Vote::Indeterminate
        }
    };
    Ok(match metric {
        MetricId::Ks => banded(t.ks_high, t.ks_low),
        MetricId::Kl => banded(t.kl_high, t.kl_low),
        MetricId::Wasserstein => banded(t.w_high, t.w_low),
        MetricId::Bhattacharyya => {
            if value < t.b_high_divergence {
                Vote::High
            } else {
                Vote::Low
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairVotes {
    pub ks: Vote,
    pub kl: Vote,
    pub wasserstein: Vote,
    pub bhattacharyya: Vote,
}

impl PairVotes {
    pub fn of(report: &DivergenceReport, t: &ThresholdConfig) -> Result<Self> {
        Ok(Self {
            ks: metric_vote(MetricId::Ks, report.ks, t)?,
            kl: metric_vote(MetricId::Kl, report.kl, t)?,
            wasserstein: metric_vote(MetricId::Wasserstein, report.wasserstein, t)?,
            bhattacharyya: metric_vote(MetricId::Bhattacharyya, report.bhattacharyya_density, t)?,
        })
    }

    pub fn sum(&self) -> i32 {
        [self.ks, self.kl, self.wasserstein, self.bhattacharyya]
            .iter()
            .map(|v| v.value())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairClass {
    Divergent,
    Convergent,
    Neutral,
}

impl PairClass {
    pub fn from_sum(sum: i32) -> Self {
        match sum {
            s if s > 0 => PairClass::Divergent,
            s if s < 0 => PairClass::Convergent,
            _ => PairClass::Neutral,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SingleDevice,
    MultiDevice,
    Indeterminate,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::SingleDevice => "single-device",
            Strategy::MultiDevice => "multi-device",
            Strategy::Indeterminate => "indeterminate",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" | "single-device" | "single_device" => Ok(Strategy::SingleDevice),
            "multi" | "multi-device" | "multi_device" => Ok(Strategy::MultiDevice),
            other => Err(Error::domain(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub device_a: usize,
    pub device_b: usize,
    pub votes: PairVotes,
    pub sum: i32,
    pub class: PairClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advisory {
    pub nmi: Option<f64>,
    pub purity: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyDecision {
    pub strategy: Strategy,
    pub pairs: Vec<PairVerdict>,
    pub divergent_pairs: usize,
    pub convergent_pairs: usize,
    pub neutral_pairs: usize,
    pub advisory: Advisory,
    pub thresholds: ThresholdConfig,
    pub rationale: Vec<String>,
}

fn fleet_rule(divergent: usize, convergent: usize, n_pairs: usize, nmi: Option<f64>, nmi_high: f64) -> Strategy {
    let half = n_pairs as f64 / 2.0;
    if divergent as f64 > half {
        Strategy::SingleDevice
    } else if convergent as f64 > half {
        Strategy::MultiDevice
    } else if nmi.is_some_and(|v| v > nmi_high) {
        Strategy::SingleDevice
    } else {
        Strategy::Indeterminate
    }
}

impl StrategyDecision {
    /// Re-evaluates the strategy from the recorded votes alone.
    pub fn rederive(&self) -> Strategy {
        let classes: Vec<PairClass> = self
            .pairs
            .iter()
            .map(|p| PairClass::from_sum(p.votes.sum()))
            .collect();
        let count = |c: PairClass| classes.iter().filter(|&&x| x == c).count();
        fleet_rule(
            count(PairClass::Divergent),
            count(PairClass::Convergent),
            self.pairs.len(),
            self.advisory.nmi,
            self.thresholds.nmi_high,
        )
    }

    /// Resolves an Indeterminate decision with the given fallback.
    pub fn resolve(&self, fallback: Option<Strategy>) -> Result<Strategy> {
        match (self.strategy, fallback) {
            (Strategy::Indeterminate, Some(f)) if f != Strategy::Indeterminate => Ok(f),
            (Strategy::Indeterminate, _) => Err(Error::Indeterminate),
            (s, _) => Ok(s),
        }
    }
}

pub fn decide(
    reports: &[DivergenceReport],
    association: Option<&AssociationReport>,
    thresholds: &ThresholdConfig,
) -> Result<StrategyDecision> {
    if reports.is_empty() {
        return Err(Error::domain("decision needs at least one pair report"));
    }
    thresholds.validate()?;
    let mut pairs = Vec::with_capacity(reports.len());
    let mut rationale = Vec::new();
    for r in reports {
        let votes = PairVotes::of(r, thresholds)?;
        let sum = votes.sum();
        let class = PairClass::from_sum(sum);
        rationale.push(format!(
            "pair ({}, {}): ks={} ({:?}), kl={} ({:?}), w={} ({:?}), b={} ({:?}) -> sum {sum:+} {class:?}",
            r.device_a,
            r.device_b,
            r.ks,
            votes.ks,
            r.kl,
            votes.kl,
            r.wasserstein,
            votes.wasserstein,
            r.bhattacharyya_density,
            votes.bhattacharyya,
        ));
        pairs.push(PairVerdict {
            device_a: r.device_a,
            device_b: r.device_b,
            votes,
            sum,
            class,
        });
    }
    let count = |c: PairClass| pairs.iter().filter(|p| p.class == c).count();
    let (divergent, convergent, neutral) = (
        count(PairClass::Divergent),
        count(PairClass::Convergent),
        count(PairClass::Neutral),
    );
    let nmi = association.map(|a| a.nmi);
    let n = pairs.len();
    rationale.push(format!(
        "{divergent} divergent, {convergent} convergent, {neutral} neutral of {n} pairs (majority needs > {})",
        n as f64 / 2.0
    ));
    let strategy = fleet_rule(divergent, convergent, n, nmi, thresholds.nmi_high);
    match nmi {
        Some(v) => rationale.push(format!(
            "cluster/device NMI {v} (advisory cut {})",
            thresholds.nmi_high
        )),
        None => rationale.push("no clustering evidence supplied".into()),
    }
    if strategy == Strategy::SingleDevice && divergent as f64 <= n as f64 / 2.0 {
        rationale.push("no pair majority; NMI above the advisory cut resolves to single-device".into());
    }
    rationale.push(format!("strategy: {strategy}"));
    Ok(StrategyDecision {
        strategy,
        pairs,
        divergent_pairs: divergent,
        convergent_pairs: convergent,
        neutral_pairs: neutral,
        advisory: Advisory {
            nmi,
            purity: association.map(|a| a.purity.clone()),
        },
        thresholds: *thresholds,
        rationale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use super::Strategy;

    fn t() -> ThresholdConfig {
        ThresholdConfig::default()
    }

    #[test]
    fn vote_examples() {
        assert_eq!(metric_vote(MetricId::Ks, 0.5867, &t()).unwrap(), Vote::High);
        assert_eq!(metric_vote(MetricId::Kl, 1.0, &t()).unwrap(), Vote::Low);
        assert_eq!(metric_vote(MetricId::Wasserstein, 0.3, &t()).unwrap(), Vote::Indeterminate);
        assert_eq!(metric_vote(MetricId::Bhattacharyya, -2.5, &t()).unwrap(), Vote::High);
        assert_eq!(metric_vote(MetricId::Bhattacharyya, -1.0, &t()).unwrap(), Vote::Low);
        assert!("xyz".parse::<MetricId>().is_err());
        assert!(metric_vote(MetricId::Ks, f64::NAN, &t()).is_err());
    }

    fn table1() -> Vec<DivergenceReport> {
        vec![
            DivergenceReport::from_values((0, 1), 0.5867, 7.9755, 0.5052, -2.7003),
            DivergenceReport::from_values((0, 2), 0.8311, 15.1497, 0.9268, -2.6519),
            DivergenceReport::from_values((1, 2), 0.4711, 5.1161, 0.4224, -2.5194),
        ]
    }

    #[test]
    fn published_metrics_choose_single_device() {
        let d = decide(&table1(), None, &t()).unwrap();
        assert_eq!(d.strategy, Strategy::SingleDevice);
        let sums: Vec<i32> = d.pairs.iter().map(|p| p.sum).collect();
        // KS 0.4711 sits in the neutral band; KL, W and B all vote High.
        assert_eq!(sums, vec![4, 4, 3]);
        assert_eq!(d.rederive(), d.strategy);
    }

    #[test]
    fn all_zero_metrics_choose_multi_device() {
        let r: Vec<_> = (0..3)
            .map(|i| DivergenceReport::from_values((i, i + 1), 0.0, 0.0, 0.0, 0.0))
            .collect();
        assert_eq!(decide(&r, None, &t()).unwrap().strategy, Strategy::MultiDevice);
    }

    #[test]
    fn neutral_fleet_is_indeterminate_until_nmi_breaks_it() {
        // Votes (+1, -1, 0, -1)... sum -1; (+1, +1, 0, -1) sum +1; neutral (0,0,0,...)
        let r = vec![
            DivergenceReport::from_values((0, 1), 0.6, 1.0, 0.3, -1.0),
            DivergenceReport::from_values((0, 2), 0.6, 6.0, 0.3, -1.0),
        ];
        let d = decide(&r, None, &t()).unwrap();
        assert_eq!(d.strategy, Strategy::Indeterminate);
        assert!(matches!(d.resolve(None), Err(Error::Indeterminate)));
        assert_eq!(d.resolve(Some(Strategy::MultiDevice)).unwrap(), Strategy::MultiDevice);
        let assoc = AssociationReport {
            counts: vec![],
            purity: vec![],
            nmi: 0.8,
        };
        assert_eq!(decide(&r, Some(&assoc), &t()).unwrap().strategy, Strategy::SingleDevice);
    }

    fn report() -> impl proptest::strategy::Strategy<Value = DivergenceReport> {
        use proptest::strategy::Strategy as _;
        (0.0f64..1.0, 0.0f64..20.0, 0.0f64..2.0, -4.0f64..1.0)
            .prop_map(|(ks, kl, w, b)| DivergenceReport::from_values((0, 1), ks, kl, w, b))
    }

    fn rank(s: Strategy) -> i32 {
        match s {
            Strategy::MultiDevice => 0,
            Strategy::Indeterminate => 1,
            Strategy::SingleDevice => 2,
        }
    }

    proptest! {
        #[test]
        fn order_invariant_and_self_consistent(reports in proptest::collection::vec(report(), 1..7), nmi in 0.0f64..1.0) {
            let assoc = AssociationReport { counts: vec![], purity: vec![], nmi };
            let d = decide(&reports, Some(&assoc), &t()).unwrap();
            let mut rev = reports.clone();
            rev.reverse();
            prop_assert_eq!(decide(&rev, Some(&assoc), &t()).unwrap().strategy, d.strategy);
            prop_assert_eq!(d.rederive(), d.strategy);
        }

        #[test]
        fn monotone_in_distances(reports in proptest::collection::vec(report(), 1..7), idx in 0usize..7, which in 0usize..3, bump in 0.0f64..5.0) {
            let before = decide(&reports, None, &t()).unwrap().strategy;
            let mut up = reports.clone();
            let r = &mut up[idx % reports.len()];
            match which {
                0 => r.ks = (r.ks + bump).min(1.0),
                1 => r.kl += bump,
                _ => r.wasserstein += bump,
            }
            let after = decide(&up, None, &t()).unwrap().strategy;
            prop_assert!(rank(after) >= rank(before));
        }
    }
}
