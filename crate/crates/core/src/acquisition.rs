//! Acquisition functions and their maximization by a genetic algorithm.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::domain::{ParameterBounds, ParameterPoint};
use crate::error::{Error, Result};
use crate::gp::{augment_task, GpModel, TaskMode};

/// Closed-form expected improvement for maximization.
pub fn expected_improvement(mu: f64, sigma: f64, f_best: f64) -> f64 {
    let diff = mu - f_best;
    if sigma <= 0.0 {
        return diff.max(0.0);
    }
    let z = diff / sigma;
    let cdf = 0.5 * erfc(-z / SQRT_2);
    let pdf = (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
    (diff * cdf + sigma * pdf).max(0.0)
}

/// Pure exploitation: the posterior mean itself.
pub fn posterior_mean_acq(model: &GpModel, x: &[f64]) -> f64 {
    model.posterior_mean(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionKind {
    ExpectedImprovement,
    PosteriorMean,
}

impl AcquisitionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AcquisitionKind::ExpectedImprovement => "ei",
            AcquisitionKind::PosteriorMean => "posterior_mean",
        }
    }
}

impl fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AcquisitionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ei" | "expected_improvement" => Ok(AcquisitionKind::ExpectedImprovement),
            "posterior_mean" | "mean" => Ok(AcquisitionKind::PosteriorMean),
            other => Err(Error::domain(format!("unknown acquisition kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSpec {
    pub kind: AcquisitionKind,
    /// Incumbent best observed value; required for EI.
    pub f_best: Option<f64>,
}

impl AcquisitionSpec {
    pub fn expected_improvement(f_best: f64) -> Self {
        Self {
            kind: AcquisitionKind::ExpectedImprovement,
            f_best: Some(f_best),
        }
    }

    pub fn posterior_mean() -> Self {
        Self {
            kind: AcquisitionKind::PosteriorMean,
            f_best: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AcquisitionKind::ExpectedImprovement && !self.f_best.is_some_and(f64::is_finite) {
            return Err(Error::domain("expected improvement needs a finite incumbent"));
        }
        Ok(())
    }

    /// Acquisition value at a model input (task-augmented for multi-task
    /// models).
    pub fn evaluate(&self, model: &GpModel, x: &[f64]) -> f64 {
        match self.kind {
            AcquisitionKind::PosteriorMean => model.posterior_mean(x),
            AcquisitionKind::ExpectedImprovement => {
                let p = model.posterior(x);
                expected_improvement(p.mean, p.variance.sqrt(), self.f_best.unwrap_or(f64::NAN))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    /// Mutation standard deviation as a fraction of box width.
    pub mutation_scale: f64,
    pub elitism: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 50,
            generations: 100,
            tournament: 3,
            crossover_rate: 0.9,
            mutation_rate: 0.2,
            mutation_scale: 0.1,
            elitism: 2,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::domain("GA population must be at least 2"));
        }
        if self.tournament == 0 || self.elitism > self.population {
            return Err(Error::domain("GA tournament size must be positive and elitism at most the population"));
        }
        for (name, r) in [("crossover", self.crossover_rate), ("mutation", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::domain(format!("GA {name} rate must lie in [0, 1]")));
            }
        }
        if !(self.mutation_scale > 0.0) {
            return Err(Error::domain("GA mutation scale must be positive"));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaResult {
    pub point: ParameterPoint,
    pub value: f64,
    /// Best value seen after the initial population and each generation.
    pub best_history: Vec<f64>,
    /// Evaluations that returned a non-finite value.
    pub non_finite: usize,
}

/// Maximizes `objective` over the box. Non-finite objective values count
/// as `-inf`.
pub fn ga_maximize<F>(objective: F, bounds: &ParameterBounds, config: &GaConfig) -> Result<GaResult>
where
    F: Fn(ParameterPoint) -> f64,
{
    bounds.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (lo, hi, width) = (bounds.lower(), bounds.upper(), bounds.widths());
    let mut non_finite = 0;
    let mut eval = |g: &[f64; 2]| {
        let v = objective(ParameterPoint::new(g[0], g[1]));
        if v.is_finite() {
            v
        } else {
            non_finite += 1;
            f64::NEG_INFINITY
        }
    };

    let mut pop: Vec<[f64; 2]> = (0..config.population)
        .map(|_| [rng.random_range(lo[0]..=hi[0]), rng.random_range(lo[1]..=hi[1])])
        .collect();
    let mut fit: Vec<f64> = pop.iter().map(&mut eval).collect();
    let argmax = |fit: &[f64]| {
        let mut b = 0;
        for (i, f) in fit.iter().enumerate() {
            if *f > fit[b] {
                b = i;
            }
        }
        b
    };
    let b = argmax(&fit);
    let (mut best, mut best_val) = (pop[b], fit[b]);
    let mut history = vec![best_val];

    for _ in 0..config.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fit[b].total_cmp(&fit[a]).then(a.cmp(&b)));
        let mut next: Vec<[f64; 2]> = order.iter().take(config.elitism).map(|&i| pop[i]).collect();
        let mut next_fit: Vec<f64> = order.iter().take(config.elitism).map(|&i| fit[i]).collect();

        let tournament = |rng: &mut ChaCha8Rng| {
            let mut w = rng.random_range(0..pop.len());
            for _ in 1..config.tournament {
                let c = rng.random_range(0..pop.len());
                if fit[c] > fit[w] {
                    w = c;
                }
            }
            w
        };
        let mut children = Vec::with_capacity(config.population);
        while next.len() + children.len() < config.population {
            let (p1, p2) = (pop[tournament(&mut rng)], pop[tournament(&mut rng)]);
            let (mut c1, mut c2) = (p1, p2);
            if rng.random::<f64>() < config.crossover_rate {
                for g in 0..2 {
                    if rng.random::<bool>() {
                        c1[g] = p2[g];
                        c2[g] = p1[g];
                    }
                }
            }
            for c in [&mut c1, &mut c2] {
                for g in 0..2 {
                    if rng.random::<f64>() < config.mutation_rate {
                        let sigma = config.mutation_scale * width[g];
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c[g] = (c[g] + sigma * z).clamp(lo[g], hi[g]);
                    }
                }
            }
            children.push(c1);
            if next.len() + children.len() < config.population {
                children.push(c2);
            }
        }
        for c in children {
            let v = eval(&c);
            if v > best_val {
                best = c;
                best_val = v;
            }
            next.push(c);
            next_fit.push(v);
        }
        pop = next;
        fit = next_fit;
        history.push(best_val);
    }

    Ok(GaResult {
        point: ParameterPoint::new(best[0], best[1]),
        value: best_val,
        best_history: history,
        non_finite,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub device_id: usize,
    pub point: ParameterPoint,
    pub acquisition_value: f64,
    /// Posterior mean at the proposal, appended as the fantasy in batches.
    pub predicted: f64,
}

/// Proposes one point for a single-task model (or task 0 of a one-task
/// augmented model).
pub fn propose_single(model: &GpModel, bounds: &ParameterBounds, spec: &AcquisitionSpec, ga: &GaConfig) -> Result<Proposal> {
    match model.mode() {
        TaskMode::Single => {
            spec.validate()?;
            let r = ga_maximize(|p| spec.evaluate(model, &p.to_vec()), bounds, ga)?;
            Ok(Proposal {
                device_id: 0,
                point: r.point,
                acquisition_value: r.value,
                predicted: model.posterior_mean(&r.point.to_vec()),
            })
        }
        TaskMode::Multi { tasks: 1 } => propose_for_task(model, bounds, spec, ga, 0),
        TaskMode::Multi { .. } => Err(Error::domain("propose_single needs a single-task model; use propose_batch")),
    }
}

/// Maximizes the acquisition over the box with the task coordinate fixed.
pub fn propose_for_task(
    model: &GpModel,
    bounds: &ParameterBounds,
    spec: &AcquisitionSpec,
    ga: &GaConfig,
    task: usize,
) -> Result<Proposal> {
    let TaskMode::Multi { tasks } = model.mode() else {
        return Err(Error::domain("task proposals need a multi-task model"));
    };
    if task >= tasks {
        return Err(Error::domain(format!("task {task} outside 0..{tasks}")));
    }
    spec.validate()?;
    let r = ga_maximize(|p| spec.evaluate(model, &augment_task(p, task)), bounds, ga)?;
    Ok(Proposal {
        device_id: task,
        point: r.point,
        acquisition_value: r.value,
        predicted: model.posterior_mean(&augment_task(r.point, task)),
    })
}

/// Proposals in priority (assignment) order; one per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchProposal {
    pub assignments: Vec<Proposal>,
}

/// Greedy batch of `n` proposals. Each step maximizes over every
/// unassigned device, assigns the best, and conditions the model on its
/// predicted value with hyperparameters frozen.
pub fn propose_batch(
    model: &GpModel,
    bounds: &ParameterBounds,
    spec: &AcquisitionSpec,
    ga: &GaConfig,
    n: usize,
) -> Result<BatchProposal> {
    let TaskMode::Multi { tasks } = model.mode() else {
        return Err(Error::domain("batch proposals need a multi-task model"));
    };
    if n == 0 || n > tasks {
        return Err(Error::domain(format!("batch size {n} must lie in 1..={tasks}")));
    }
    let mut unassigned: Vec<usize> = (0..n).collect();
    let mut current = model.clone();
    let mut assignments = Vec::with_capacity(n);
    for step in 0..n {
        let mut best: Option<Proposal> = None;
        for &t in &unassigned {
            let seed = ga.seed.wrapping_add((step * tasks + t) as u64 * 7919);
            let p = propose_for_task(&current, bounds, spec, &ga.with_seed(seed), t)?;
            if best.as_ref().is_none_or(|b| p.acquisition_value > b.acquisition_value) {
                best = Some(p);
            }
        }
        let chosen = best.expect("at least one unassigned device");
        unassigned.retain(|&t| t != chosen.device_id);
        if !unassigned.is_empty() {
            current = current.with_observation(augment_task(chosen.point, chosen.device_id), chosen.device_id, chosen.predicted)?;
        }
        assignments.push(chosen);
    }
    Ok(BatchProposal { assignments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{HpBounds, Hyperparameters, TrainingData};
    use proptest::prelude::*;

    #[test]
    fn ei_degenerate_cases() {
        assert_eq!(expected_improvement(1.0, 0.0, 2.0), 0.0);
        assert_eq!(expected_improvement(2.0, 0.0, 2.0), 0.0);
        assert_eq!(expected_improvement(3.5, 0.0, 2.0), 1.5);
        assert!((expected_improvement(0.0, 1.0, 0.0) - 0.398_942_280_401_432_7).abs() < 1e-12);
        assert!((expected_improvement(3.0, 0.01, 0.0) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn monotone_objective_hits_upper_flow() {
        let b = ParameterBounds::default();
        let r = ga_maximize(|p| p.flow, &b, &GaConfig::default()).unwrap();
        assert!((r.point.flow - 5000.0).abs() <= 0.01 * 4000.0);
    }

    #[test]
    fn non_finite_fitness_is_recorded() {
        let b = ParameterBounds::default();
        let r = ga_maximize(|p| if p.flow > 3000.0 { f64::NAN } else { p.flow }, &b, &GaConfig::default()).unwrap();
        assert!(r.non_finite > 0);
        assert!(r.point.flow <= 3000.0 && r.value.is_finite());
    }

    #[test]
    fn ga_is_deterministic_and_elitist() {
        let b = ParameterBounds::default();
        let obj = |p: ParameterPoint| -((p.flow - 2200.0) / 1000.0).powi(2) - ((p.layer_height - 0.5) / 0.1).powi(2);
        let a = ga_maximize(obj, &b, &GaConfig::default().with_seed(4)).unwrap();
        let c = ga_maximize(obj, &b, &GaConfig::default().with_seed(4)).unwrap();
        assert_eq!(a, c);
        assert!(a.best_history.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(a.best_history.len(), 101);
    }

    fn planted_model(peak: ParameterPoint) -> GpModel {
        let mut pts = vec![peak];
        let mut y = vec![0.0];
        for (i, f) in [1200.0, 2000.0, 4000.0, 4800.0].iter().enumerate() {
            for lh in [0.22, 0.4, 0.58] {
                pts.push(ParameterPoint::new(*f, lh));
                y.push(-0.1 - 0.01 * i as f64);
            }
        }
        let data = TrainingData::single(&pts, y).unwrap();
        let hps = Hyperparameters {
            signal_variance: 0.01,
            lengthscales: vec![600.0, 0.1],
            noise_variances: vec![1e-4],
        };
        GpModel::new(data, hps, HpBounds::default_for(TaskMode::Single)).unwrap()
    }

    #[test]
    fn posterior_mean_proposal_finds_planted_peak() {
        let peak = ParameterPoint::new(3100.0, 0.35);
        let m = planted_model(peak);
        let p = propose_single(&m, &ParameterBounds::default(), &AcquisitionSpec::posterior_mean(), &GaConfig::default()).unwrap();
        assert!((p.point.flow - peak.flow).abs() <= 0.02 * 4000.0, "{p:?}");
        assert!((p.point.layer_height - peak.layer_height).abs() <= 0.02 * 0.4, "{p:?}");
        assert_eq!(p.acquisition_value, posterior_mean_acq(&m, &p.point.to_vec()));
    }

    #[test]
    fn flat_ei_landscape_still_proposes() {
        let m = planted_model(ParameterPoint::new(3000.0, 0.4));
        let p = propose_single(&m, &ParameterBounds::default(), &AcquisitionSpec::expected_improvement(100.0), &GaConfig::default()).unwrap();
        assert!(p.acquisition_value >= 0.0 && p.acquisition_value < 1e-12);
        assert!(ParameterBounds::default().contains(&p.point));
    }

    #[test]
    fn ei_requires_incumbent() {
        let spec = AcquisitionSpec {
            kind: AcquisitionKind::ExpectedImprovement,
            f_best: None,
        };
        assert!(spec.validate().is_err());
    }

    proptest! {
        #[test]
        fn ei_non_negative_and_monotone_in_sigma(mu in -3.0f64..3.0, fb in -3.0f64..3.0, s in 0.0f64..3.0, ds in 0.0f64..2.0) {
            let a = expected_improvement(mu, s, fb);
            prop_assert!(a >= 0.0);
            prop_assert!(expected_improvement(mu, s + ds, fb) >= a - 1e-12);
            prop_assert!(a >= (mu - fb).max(0.0) - 1e-12);
        }

        #[test]
        fn ga_stays_in_bounds(seed in 0u64..1000, cx in 1000.0f64..5000.0) {
            let b = ParameterBounds::default();
            let cfg = GaConfig { generations: 10, seed, ..Default::default() };
            let r = ga_maximize(|p| -(p.flow - cx).abs(), &b, &cfg).unwrap();
            prop_assert!(b.contains(&r.point));
        }
    }
}
