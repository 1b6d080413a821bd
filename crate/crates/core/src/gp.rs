//! Gaussian-process surrogate with an anisotropic Matérn-3/2 kernel.
//!
//! Multi-device models append the device index as an extra input
//! coordinate and carry one noise variance per device; each training row's
//! noise term is looked up by its device.
//!
//! Hyperparameters are optimized in log space, ordered as
//! `[ln β, ln λ_1 .. ln λ_d, ln σ²_1 .. ln σ²_t]`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::ParameterPoint;
use crate::error::{Error, Result};
use crate::optimize::{minimize_box, BoxMinimizerConfig};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Jitter ladder tried after an unjittered factorization fails.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Factor applied when deciding that a lengthscale is pinned at a bound.
pub const PINNED_FACTOR: f64 = 1.05;
pub const MAX_RELAX_ROUNDS: usize = 3;

/// `β (1 + √3 r) exp(-√3 r)` with `r² = Σ (x_i - x'_i)² / λ_i²`.
pub fn matern32(x: &[f64], x2: &[f64], lengthscales: &[f64], signal_variance: f64) -> f64 {
    let r = scaled_distance(x, x2, lengthscales);
    signal_variance * (1.0 + SQRT3 * r) * (-SQRT3 * r).exp()
}

fn scaled_distance(x: &[f64], x2: &[f64], lengthscales: &[f64]) -> f64 {
    x.iter()
        .zip(x2)
        .zip(lengthscales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TaskMode {
    Single,
    Multi { tasks: usize },
}

impl TaskMode {
    pub fn input_dim(&self) -> usize {
        match self {
            TaskMode::Single => 2,
            TaskMode::Multi { .. } => 3,
        }
    }

    pub fn noise_count(&self) -> usize {
        match self {
            TaskMode::Single => 1,
            TaskMode::Multi { tasks } => *tasks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variances: Vec<f64>,
}

impl Hyperparameters {
    /// First-iteration guesses: β = 100, every lengthscale 1, every noise
    /// variance 0.01.
    pub fn initial(mode: TaskMode) -> Self {
        Self {
            signal_variance: 100.0,
            lengthscales: vec![1.0; mode.input_dim()],
            noise_variances: vec![0.01; mode.noise_count()],
        }
    }

    pub fn to_log(&self) -> Vec<f64> {
        std::iter::once(self.signal_variance)
            .chain(self.lengthscales.iter().copied())
            .chain(self.noise_variances.iter().copied())
            .map(f64::ln)
            .collect()
    }

    pub fn from_log(theta: &[f64], mode: TaskMode) -> Self {
        let d = mode.input_dim();
        Self {
            signal_variance: theta[0].exp(),
            lengthscales: theta[1..=d].iter().map(|v| v.exp()).collect(),
            noise_variances: theta[d + 1..].iter().map(|v| v.exp()).collect(),
        }
    }

    pub fn matches(&self, mode: TaskMode) -> bool {
        self.lengthscales.len() == mode.input_dim() && self.noise_variances.len() == mode.noise_count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpBounds {
    pub signal_variance: (f64, f64),
    pub lengthscales: Vec<(f64, f64)>,
    pub noise_variances: Vec<(f64, f64)>,
}

impl HpBounds {
    /// β ∈ [1e-5, 1e5], λ_flow ∈ [1, 1e4], λ_LH ∈ [1e-3, 10], noise ∈
    /// [1e-4, 1]. The task coordinate reuses the layer-height range.
    pub fn default_for(mode: TaskMode) -> Self {
        let mut lengthscales = vec![(1.0, 1e4), (1e-3, 10.0)];
        if let TaskMode::Multi { .. } = mode {
            lengthscales.push((1e-3, 10.0));
        }
        Self {
            signal_variance: (1e-5, 1e5),
            lengthscales,
            noise_variances: vec![(1e-4, 1.0); mode.noise_count()],
        }
    }

    pub fn pairs(&self) -> Vec<(f64, f64)> {
        std::iter::once(self.signal_variance)
            .chain(self.lengthscales.iter().copied())
            .chain(self.noise_variances.iter().copied())
            .collect()
    }

    pub fn log_lower(&self) -> Vec<f64> {
        self.pairs().iter().map(|p| p.0.ln()).collect()
    }

    pub fn log_upper(&self) -> Vec<f64> {
        self.pairs().iter().map(|p| p.1.ln()).collect()
    }

    pub fn validate(&self, mode: TaskMode) -> Result<()> {
        if self.lengthscales.len() != mode.input_dim() || self.noise_variances.len() != mode.noise_count() {
            return Err(Error::domain("hyperparameter bound counts do not match the task mode"));
        }
        if self.pairs().iter().any(|&(lo, hi)| !(lo > 0.0 && lo < hi && hi.is_finite())) {
            return Err(Error::domain("hyperparameter bounds need 0 < lb < ub"));
        }
        Ok(())
    }

    pub fn contains(&self, hps: &Hyperparameters) -> bool {
        let vals = std::iter::once(hps.signal_variance)
            .chain(hps.lengthscales.iter().copied())
            .chain(hps.noise_variances.iter().copied());
        vals.zip(self.pairs())
            .all(|(v, (lo, hi))| v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12))
    }

    /// Clamps into the box, returning the clamped values and whether any
    /// entry moved.
    pub fn clamp(&self, hps: &Hyperparameters, mode: TaskMode) -> (Hyperparameters, bool) {
        let theta = hps.to_log();
        let (lo, hi) = (self.log_lower(), self.log_upper());
        let clamped: Vec<f64> = theta
            .iter()
            .zip(lo.iter().zip(&hi))
            .map(|(t, (l, h))| t.clamp(*l, *h))
            .collect();
        let moved = clamped.iter().zip(&theta).any(|(a, b)| a != b);
        (Hyperparameters::from_log(&clamped, mode), moved)
    }
}

/// Training inputs. `noise_index[i]` selects the noise variance for row
/// `i` (always 0 in single-task mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub noise_index: Vec<usize>,
    pub mode: TaskMode,
}

impl TrainingData {
    pub fn single(points: &[ParameterPoint], targets: Vec<f64>) -> Result<Self> {
        Self::new(
            points.iter().map(|p| p.to_vec()).collect(),
            targets,
            vec![0; points.len()],
            TaskMode::Single,
        )
    }

    /// Task-augmented data: inputs get the device index appended.
    pub fn multi(points: &[ParameterPoint], devices: &[usize], targets: Vec<f64>, tasks: usize) -> Result<Self> {
        if devices.len() != points.len() {
            return Err(Error::domain("one device id per point is required"));
        }
        Self::new(
            points.iter().zip(devices).map(|(p, &d)| augment_task(*p, d)).collect(),
            targets,
            devices.to_vec(),
            TaskMode::Multi { tasks },
        )
    }

    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>, noise_index: Vec<usize>, mode: TaskMode) -> Result<Self> {
        if inputs.len() != targets.len() || inputs.len() != noise_index.len() {
            return Err(Error::domain("inputs, targets and noise indices differ in length"));
        }
        if inputs.iter().any(|x| x.len() != mode.input_dim()) {
            return Err(Error::domain("input dimension does not match the task mode"));
        }
        if noise_index.iter().any(|&t| t >= mode.noise_count()) {
            return Err(Error::domain("noise index outside the task range"));
        }
        if inputs.iter().flatten().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::domain("training data must be finite"));
        }
        Ok(Self {
            inputs,
            targets,
            noise_index,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn target_mean(&self) -> f64 {
        self.targets.iter().sum::<f64>() / self.targets.len() as f64
    }
}

/// Appends the device index as a trailing real coordinate.
pub fn augment_task(point: ParameterPoint, device_id: usize) -> Vec<f64> {
    vec![point.flow, point.layer_height, device_id as f64]
}

/// Drops the task coordinate from an augmented input.
pub fn strip_task(x: &[f64]) -> (ParameterPoint, usize) {
    (ParameterPoint::new(x[0], x[1]), x[2].round() as usize)
}

fn kernel_matrix(data: &TrainingData, hps: &Hyperparameters) -> DMatrix<f64> {
    let m = data.len();
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        k[(i, i)] = hps.signal_variance;
        for j in 0..i {
            let v = matern32(&data.inputs[i], &data.inputs[j], &hps.lengthscales, hps.signal_variance);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn noisy_kernel(data: &TrainingData, hps: &Hyperparameters) -> DMatrix<f64> {
    let mut k = kernel_matrix(data, hps);
    for (i, &t) in data.noise_index.iter().enumerate() {
        k[(i, i)] += hps.noise_variances[t];
    }
    k
}

/// Cholesky with the jitter ladder. Returns the factor and the jitter used.
fn factorize(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok((c, 0.0));
    }
    for &jitter in &JITTER_LADDER {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            log::debug!("kernel factorization needed jitter {jitter}");
            return Ok((c, jitter));
        }
    }
    Err(Error::Training(
        "kernel matrix is not positive definite even with 1e-6 jitter".into(),
    ))
}

/// Log marginal likelihood and its gradient with respect to the log-space
/// hyperparameters. The prior mean is the target mean.
pub fn lml_with_gradient(data: &TrainingData, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mode = data.mode;
    let hps = Hyperparameters::from_log(theta, mode);
    let m = data.len();
    let d = mode.input_dim();
    let k = noisy_kernel(data, &hps);
    let (chol, _) = factorize(&k)?;
    let prior = data.target_mean();
    let y = DVector::from_iterator(m, data.targets.iter().map(|t| t - prior));
    let alpha = chol.solve(&y);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * m as f64 * (2.0 * PI).ln();

    // ½ tr((ααᵀ - K⁻¹) ∂K/∂θ)
    let kinv = chol.inverse();
    let mut grad = vec![0.0; theta.len()];
    let beta = hps.signal_variance;
    let mut s = vec![0.0; d];
    for i in 0..m {
        let w_ii = alpha[i] * alpha[i] - kinv[(i, i)];
        grad[0] += 0.5 * w_ii * beta;
        let t = data.noise_index[i];
        grad[1 + d + t] += 0.5 * w_ii * hps.noise_variances[t];
        for j in 0..i {
            let w_ij = alpha[i] * alpha[j] - kinv[(i, j)];
            let mut r2 = 0.0;
            for (c, sc) in s.iter_mut().enumerate() {
                *sc = ((data.inputs[i][c] - data.inputs[j][c]) / hps.lengthscales[c]).powi(2);
                r2 += *sc;
            }
            let r = r2.sqrt();
            let e = (-SQRT3 * r).exp();
            // Off-diagonal entries appear twice in the trace.
            grad[0] += w_ij * beta * (1.0 + SQRT3 * r) * e;
            let common = w_ij * 3.0 * beta * e;
            for (c, sc) in s.iter().enumerate() {
                grad[1 + c] += common * sc;
            }
        }
    }
    if !lml.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Training("non-finite log marginal likelihood".into()));
    }
    Ok((lml, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Total starts: the warm start plus `restarts - 1` log-uniform draws.
    pub restarts: usize,
    pub seed: u64,
    pub max_iterations: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            seed: 0,
            max_iterations: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub hps: Hyperparameters,
    pub lml: f64,
    pub failed_restarts: usize,
    pub warnings: Vec<String>,
}

/// Maximizes the log marginal likelihood under box bounds from the warm
/// start and seeded log-uniform draws; returns the best optimum.
pub fn train(
    data: &TrainingData,
    bounds: &HpBounds,
    init: &Hyperparameters,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let mode = data.mode;
    if data.len() < 2 {
        return Err(Error::Training("at least 2 training points are required".into()));
    }
    if !init.matches(mode) {
        return Err(Error::domain("initial hyperparameters do not match the task mode"));
    }
    bounds.validate(mode)?;
    let mut warnings = Vec::new();
    let (start, clamped) = bounds.clamp(init, mode);
    if clamped {
        let msg = format!("initial hyperparameters {init:?} clamped into bounds");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let (lo, hi) = (bounds.log_lower(), bounds.log_upper());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![start.to_log()];
    for _ in 1..opts.restarts.max(1) {
        starts.push(lo.iter().zip(&hi).map(|(l, h)| rng.random_range(*l..=*h)).collect());
    }

    let cfg = BoxMinimizerConfig {
        max_iterations: opts.max_iterations,
        ..Default::default()
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut failed = 0;
    for x0 in starts {
        let objective = |theta: &[f64]| {
            lml_with_gradient(data, theta)
                .ok()
                .map(|(v, g)| (-v, g.into_iter().map(|x| -x).collect()))
        };
        match minimize_box(objective, &x0, &lo, &hi, &cfg) {
            Some((theta, neg_lml)) => {
                if best.as_ref().is_none_or(|(_, b)| -neg_lml > *b) {
                    best = Some((theta, -neg_lml));
                }
            }
            None => failed += 1,
        }
    }
    let (theta, lml) = best.ok_or_else(|| Error::Training("every restart failed to factorize".into()))?;
    Ok(TrainOutcome {
        hps: Hyperparameters::from_log(&theta, mode),
        lml,
        failed_restarts: failed,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
}

/// Serializable form of a model; the factorization is rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpCheckpoint {
    pub data: TrainingData,
    pub hps: Hyperparameters,
    pub bounds: HpBounds,
    pub prior_mean: f64,
}

/// A conditioned GP. Immutable; adding observations returns a new model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "GpCheckpoint", try_from = "GpCheckpoint")]
pub struct GpModel {
    data: TrainingData,
    hps: Hyperparameters,
    bounds: HpBounds,
    prior_mean: f64,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl PartialEq for GpModel {
    fn eq(&self, other: &Self) -> bool {
        self.checkpoint() == other.checkpoint()
    }
}

impl From<GpModel> for GpCheckpoint {
    fn from(m: GpModel) -> Self {
        m.checkpoint()
    }
}

impl TryFrom<GpCheckpoint> for GpModel {
    type Error = Error;

    fn try_from(c: GpCheckpoint) -> Result<Self> {
        GpModel::with_prior_mean(c.data, c.hps, c.bounds, c.prior_mean)
    }
}

impl GpModel {
    /// Conditions on `data` with the target mean as prior mean.
    pub fn new(data: TrainingData, hps: Hyperparameters, bounds: HpBounds) -> Result<Self> {
        let prior = data.target_mean();
        Self::with_prior_mean(data, hps, bounds, prior)
    }

    pub fn with_prior_mean(data: TrainingData, hps: Hyperparameters, bounds: HpBounds, prior_mean: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::domain("GP needs at least one training point"));
        }
        if !hps.matches(data.mode) {
            return Err(Error::domain("hyperparameters do not match the task mode"));
        }
        bounds.validate(data.mode)?;
        if !bounds.contains(&hps) {
            return Err(Error::domain("hyperparameters lie outside their bounds"));
        }
        let k = noisy_kernel(&data, &hps);
        let (chol, jitter) = factorize(&k)?;
        let y = DVector::from_iterator(data.len(), data.targets.iter().map(|t| t - prior_mean));
        let alpha = chol.solve(&y);
        Ok(Self {
            data,
            hps,
            bounds,
            prior_mean,
            jitter,
            chol,
            alpha,
        })
    }

    /// Trains hyperparameters and conditions on the data.
    pub fn fit(data: TrainingData, bounds: HpBounds, init: &Hyperparameters, opts: &TrainOptions) -> Result<(Self, TrainOutcome)> {
        let outcome = train(&data, &bounds, init, opts)?;
        let model = Self::new(data, outcome.hps.clone(), bounds)?;
        Ok((model, outcome))
    }

    pub fn checkpoint(&self) -> GpCheckpoint {
        GpCheckpoint {
            data: self.data.clone(),
            hps: self.hps.clone(),
            bounds: self.bounds.clone(),
            prior_mean: self.prior_mean,
        }
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    pub fn hps(&self) -> &Hyperparameters {
        &self.hps
    }

    pub fn bounds(&self) -> &HpBounds {
        &self.bounds
    }

    pub fn mode(&self) -> TaskMode {
        self.data.mode
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Smallest pivot of the cached factorization.
    pub fn min_pivot(&self) -> f64 {
        self.chol.l_dirty().diagonal().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let m = self.data.len() as f64;
        let y = DVector::from_iterator(self.data.len(), self.data.targets.iter().map(|t| t - self.prior_mean));
        let log_det: f64 = 2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * y.dot(&self.alpha) - 0.5 * log_det - 0.5 * m * (2.0 * PI).ln()
    }

    fn cross(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.data.len(),
            self.data
                .inputs
                .iter()
                .map(|xi| matern32(x, xi, &self.hps.lengthscales, self.hps.signal_variance)),
        )
    }

    pub fn posterior_mean(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (xi, a) in self.data.inputs.iter().zip(self.alpha.iter()) {
            acc += matern32(x, xi, &self.hps.lengthscales, self.hps.signal_variance) * a;
        }
        self.prior_mean + acc
    }

    pub fn posterior(&self, x: &[f64]) -> Posterior {
        let k = self.cross(x);
        let mean = self.prior_mean + k.dot(&self.alpha);
        // v = L⁻¹ k, variance = β - vᵀv
        let l = self.chol.l_dirty();
        let m = k.len();
        let mut v = k;
        for i in 0..m {
            let mut s = v[i];
            for j in 0..i {
                s -= l[(i, j)] * v[j];
            }
            v[i] = s / l[(i, i)];
        }
        let variance = (self.hps.signal_variance - v.norm_squared()).max(0.0);
        Posterior { mean, variance }
    }

    /// Conditions on one more observation with frozen hyperparameters and
    /// prior mean, extending the cached factorization.
    pub fn with_observation(&self, x: Vec<f64>, noise_index: usize, y: f64) -> Result<Self> {
        if x.len() != self.data.mode.input_dim() || noise_index >= self.data.mode.noise_count() {
            return Err(Error::domain("observation does not match the model's task mode"));
        }
        let m = self.data.len();
        let k = self.cross(&x);
        let mut col = DVector::zeros(m + 1);
        col.rows_mut(0, m).copy_from(&k);
        col[m] = self.hps.signal_variance + self.hps.noise_variances[noise_index] + self.jitter;
        let mut data = self.data.clone();
        data.inputs.push(x);
        data.targets.push(y);
        data.noise_index.push(noise_index);

        let chol = self.chol.insert_column(m, col);
        let pivots_ok = chol.l_dirty().diagonal().iter().all(|p| p.is_finite() && *p > 0.0);
        if !pivots_ok {
            return Self::with_prior_mean(data, self.hps.clone(), self.bounds.clone(), self.prior_mean);
        }
        let yc = DVector::from_iterator(m + 1, data.targets.iter().map(|t| t - self.prior_mean));
        let alpha = chol.solve(&yc);
        Ok(Self {
            data,
            hps: self.hps.clone(),
            bounds: self.bounds.clone(),
            prior_mean: self.prior_mean,
            jitter: self.jitter,
            chol,
            alpha,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelaxOutcome {
    pub model: GpModel,
    pub rounds: usize,
    /// True when a lengthscale was still pinned after the last round.
    pub still_pinned: bool,
    pub lml: f64,
}

fn pinned_lengthscales(hps: &Hyperparameters, bounds: &HpBounds) -> Vec<(usize, bool)> {
    hps.lengthscales
        .iter()
        .zip(&bounds.lengthscales)
        .enumerate()
        .filter_map(|(i, (&l, &(lo, hi)))| {
            if l <= lo * PINNED_FACTOR {
                Some((i, false))
            } else if l >= hi / PINNED_FACTOR {
                Some((i, true))
            } else {
                None
            }
        })
        .collect()
}

/// Widens the bound of every lengthscale pinned at it by one decade and
/// retrains from the current estimate, for at most three rounds.
pub fn relax_bounds_and_retrain(model: &GpModel, opts: &TrainOptions) -> Result<RelaxOutcome> {
    if model.mode() != TaskMode::Single {
        return Err(Error::domain("bound relaxation applies to single-task models only"));
    }
    let mut current = model.clone();
    let mut lml = current.log_marginal_likelihood();
    let mut rounds = 0;
    loop {
        let pinned = pinned_lengthscales(current.hps(), current.bounds());
        if pinned.is_empty() {
            return Ok(RelaxOutcome {
                model: current,
                rounds,
                still_pinned: false,
                lml,
            });
        }
        if rounds == MAX_RELAX_ROUNDS {
            log::warn!("lengthscales still pinned after {MAX_RELAX_ROUNDS} relaxation rounds");
            return Ok(RelaxOutcome {
                model: current,
                rounds,
                still_pinned: true,
                lml,
            });
        }
        let mut bounds = current.bounds().clone();
        for (i, upper) in pinned {
            if upper {
                bounds.lengthscales[i].1 *= 10.0;
            } else {
                bounds.lengthscales[i].0 *= 0.1;
            }
        }
        rounds += 1;
        let round_opts = TrainOptions {
            seed: opts.seed.wrapping_add(rounds as u64 * 0x9E37_79B9),
            ..*opts
        };
        let (next, outcome) = GpModel::fit(current.data().clone(), bounds, current.hps(), &round_opts)?;
        lml = outcome.lml;
        current = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_single(m: usize, seed: u64) -> TrainingData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<ParameterPoint> = (0..m)
            .map(|_| ParameterPoint::new(rng.random_range(1000.0..5000.0), rng.random_range(0.2..0.6)))
            .collect();
        let y = pts.iter().map(|p| -((p.flow - 3000.0) / 2000.0).abs() * 0.1 + rng.random_range(-0.01..0.01)).collect();
        TrainingData::single(&pts, y).unwrap()
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(matern32(&[1.0, 2.0], &[1.0, 2.0], &[3.0, 4.0], 2.5), 2.5);
        let v = matern32(&[0.0], &[1.0], &[1.0], 1.0);
        assert!((v - 0.483_357_724_596_507_7).abs() < 1e-14);
        let a = matern32(&[1.0, 5.0], &[2.0, 1.0], &[0.5, 2.0], 1.3);
        let b = matern32(&[1.0, 50.0], &[2.0, 10.0], &[0.5, 20.0], 1.3);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn single_point_lml_closed_form() {
        let data = TrainingData::new(vec![vec![0.0, 0.0]], vec![0.0], vec![0], TaskMode::Single).unwrap();
        let hps = Hyperparameters {
            signal_variance: 0.75,
            lengthscales: vec![1.0, 1.0],
            noise_variances: vec![0.25],
        };
        let mut bounds = HpBounds::default_for(TaskMode::Single);
        bounds.lengthscales[0].0 = 0.1;
        let m = GpModel::new(data, hps, bounds).unwrap();
        assert!((m.log_marginal_likelihood() + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_points_do_not_crash() {
        let p = ParameterPoint::new(3000.0, 0.4);
        let data = TrainingData::single(&[p, p, p], vec![-0.01, -0.02, -0.015]).unwrap();
        let hps = Hyperparameters {
            signal_variance: 1.0,
            lengthscales: vec![100.0, 0.1],
            noise_variances: vec![1e-20],
        };
        let bounds = HpBounds {
            signal_variance: (1e-5, 1e5),
            lengthscales: vec![(1.0, 1e4), (1e-3, 10.0)],
            noise_variances: vec![(1e-30, 1.0)],
        };
        let m = GpModel::new(data, hps, bounds).unwrap();
        assert!(m.log_marginal_likelihood().is_finite());
        assert!(m.posterior(&[3000.0, 0.4]).mean.is_finite());
    }

    #[test]
    fn posterior_far_from_data_reverts_to_prior() {
        let data = random_single(8, 1);
        let hps = Hyperparameters {
            signal_variance: 0.3,
            lengthscales: vec![10.0, 0.01],
            noise_variances: vec![0.01],
        };
        let m = GpModel::new(data, hps, HpBounds::default_for(TaskMode::Single)).unwrap();
        let p = m.posterior(&[1e6, 1e3]);
        assert!((p.mean - m.prior_mean()).abs() < 1e-6);
        assert!((p.variance - 0.3).abs() < 1e-6);
    }

    #[test]
    fn fantasy_extension_matches_refactorization() {
        let data = random_single(10, 4);
        let hps = Hyperparameters {
            signal_variance: 0.01,
            lengthscales: vec![800.0, 0.2],
            noise_variances: vec![1e-3],
        };
        let m = GpModel::new(data.clone(), hps.clone(), HpBounds::default_for(TaskMode::Single)).unwrap();
        let x = vec![2500.0, 0.33];
        let y = m.posterior_mean(&x);
        let ext = m.with_observation(x.clone(), 0, y).unwrap();
        let mut d2 = data;
        d2.inputs.push(x);
        d2.targets.push(y);
        d2.noise_index.push(0);
        let full = GpModel::with_prior_mean(d2, hps, HpBounds::default_for(TaskMode::Single), m.prior_mean()).unwrap();
        for q in [[1200.0, 0.25], [2500.0, 0.33], [4800.0, 0.59]] {
            let (a, b) = (ext.posterior(&q), full.posterior(&q));
            assert!((a.mean - b.mean).abs() < 1e-10);
            assert!((a.variance - b.variance).abs() < 1e-10);
        }
        // Conditioning on the predicted value leaves the mean unchanged.
        assert!((ext.posterior_mean(&[1500.0, 0.5]) - m.posterior_mean(&[1500.0, 0.5])).abs() < 1e-10);
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = random_single(6, 9);
        let m = GpModel::new(data, Hyperparameters::initial(TaskMode::Single), HpBounds::default_for(TaskMode::Single)).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: GpModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.posterior(&[2000.0, 0.3]), m.posterior(&[2000.0, 0.3]));
    }

    #[test]
    fn init_outside_bounds_is_clamped() {
        let data = random_single(6, 2);
        let init = Hyperparameters {
            signal_variance: 1e9,
            lengthscales: vec![1.0, 1.0],
            noise_variances: vec![0.01],
        };
        let out = train(
            &data,
            &HpBounds::default_for(TaskMode::Single),
            &init,
            &TrainOptions { restarts: 1, ..Default::default() },
        )
        .unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(HpBounds::default_for(TaskMode::Single).contains(&out.hps));
    }

    #[test]
    fn no_pinned_lengthscale_is_a_no_op() {
        let data = random_single(6, 3);
        let hps = Hyperparameters {
            signal_variance: 0.01,
            lengthscales: vec![500.0, 0.1],
            noise_variances: vec![1e-3],
        };
        let m = GpModel::new(data, hps, HpBounds::default_for(TaskMode::Single)).unwrap();
        let r = relax_bounds_and_retrain(&m, &TrainOptions::default()).unwrap();
        assert_eq!(r.rounds, 0);
        assert_eq!(r.model, m);
    }

    #[test]
    fn pinned_upper_bound_relaxes_one_decade() {
        // Targets independent of layer height pin its lengthscale at the
        // upper bound.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<ParameterPoint> = (0..20)
            .map(|_| ParameterPoint::new(rng.random_range(1000.0..5000.0), rng.random_range(0.2..0.6)))
            .collect();
        let y: Vec<f64> = pts.iter().map(|p| ((p.flow - 1000.0) / 1500.0).sin() * 0.1).collect();
        let data = TrainingData::single(&pts, y).unwrap();
        let hps = Hyperparameters {
            signal_variance: 0.01,
            lengthscales: vec![1500.0, 10.0],
            noise_variances: vec![1e-4],
        };
        let m = GpModel::new(data, hps, HpBounds::default_for(TaskMode::Single)).unwrap();
        let r = relax_bounds_and_retrain(&m, &TrainOptions { restarts: 2, ..Default::default() }).unwrap();
        assert!(r.rounds >= 1);
        assert!(r.model.bounds().lengthscales[1].1 >= 100.0);
        assert!(r.model.bounds().contains(r.model.hps()));
    }

    #[test]
    fn relax_rejects_multi_task() {
        let pts = [ParameterPoint::new(2000.0, 0.3), ParameterPoint::new(3000.0, 0.4)];
        let data = TrainingData::multi(&pts, &[0, 1], vec![0.0, 0.1], 2).unwrap();
        let mode = TaskMode::Multi { tasks: 2 };
        let m = GpModel::new(data, Hyperparameters::initial(mode), HpBounds::default_for(mode)).unwrap();
        assert!(relax_bounds_and_retrain(&m, &TrainOptions::default()).is_err());
    }

    #[test]
    fn augment_and_strip() {
        let p = ParameterPoint::new(3000.0, 0.4);
        assert_eq!(augment_task(p, 0), vec![3000.0, 0.4, 0.0]);
        assert_eq!(augment_task(ParameterPoint::new(1000.0, 0.2), 2), vec![1000.0, 0.2, 2.0]);
        assert_eq!(strip_task(&augment_task(p, 2)), (p, 2));
    }

    #[test]
    fn training_is_deterministic() {
        let data = random_single(15, 8);
        let opts = TrainOptions { seed: 3, ..Default::default() };
        let b = HpBounds::default_for(TaskMode::Single);
        let a = train(&data, &b, &Hyperparameters::initial(TaskMode::Single), &opts).unwrap();
        let c = train(&data, &b, &Hyperparameters::initial(TaskMode::Single), &opts).unwrap();
        assert_eq!(a, c);
    }
}
