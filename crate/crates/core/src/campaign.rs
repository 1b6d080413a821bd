//! Campaign workflow: initial design, noise analysis, strategy decision and
//! the iterative optimization loop, with JSON checkpoints.
//!
//! The initial design is iteration 0. Optimization iterations count from 1;
//! iterations up to `ei_iterations` use expected improvement and later ones
//! the posterior mean.
//!
//! All randomness is derived from the configured seed and the position in
//! the campaign (purpose, iteration, device), so a checkpoint needs no
//! generator state to resume identically.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{propose_batch, propose_single, AcquisitionKind, AcquisitionSpec, GaConfig};
use crate::clustering::{association, campaign_k, kmeans, AssociationReport, ClusteringConfig, ClusteringResult};
use crate::decision::{decide, PairVotes, Strategy, StrategyDecision, ThresholdConfig};
use crate::divergence::{pairwise_reports, DivergenceReport, HistogramPolicy};
use crate::domain::{ingest_reader, Dataset, ExperimentRecord, ParameterBounds, ParameterPoint, RepetitionMode};
use crate::error::{Error, Result};
use crate::gp::{relax_bounds_and_retrain, GpModel, HpBounds, Hyperparameters, TaskMode, TrainOptions, TrainingData};
use crate::simulator::{simulate_measurement, FleetSimConfig};
use crate::stats::{box_summaries, kde, run_features, BandwidthRule, BoxSummary, FeatureMatrix, KdeSummary};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub bounds: ParameterBounds,
    pub fleet_size: usize,
    pub initial_sets: usize,
    pub replicates: u32,
    pub ei_iterations: u32,
    pub max_iterations: u32,
    pub ga: GaConfig,
    pub thresholds: ThresholdConfig,
    pub histogram: HistogramPolicy,
    pub clustering: ClusteringConfig,
    pub gp_restarts: usize,
    pub seed: u64,
    /// Skips the decision and forces this strategy.
    pub strategy_override: Option<Strategy>,
    /// Used when the decision is Indeterminate.
    pub fallback: Option<Strategy>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            bounds: ParameterBounds::default(),
            fleet_size: 3,
            initial_sets: 25,
            replicates: 3,
            ei_iterations: 11,
            max_iterations: 25,
            ga: GaConfig::default(),
            thresholds: ThresholdConfig::default(),
            histogram: HistogramPolicy::default(),
            clustering: ClusteringConfig::default(),
            gp_restarts: 5,
            seed: 0,
            strategy_override: None,
            fallback: None,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        self.ga.validate()?;
        self.thresholds.validate()?;
        if self.fleet_size == 0 || self.initial_sets == 0 || self.replicates == 0 {
            return Err(Error::domain("fleet size, initial sets and replicates must be at least 1"));
        }
        if self.ei_iterations > self.max_iterations {
            return Err(Error::domain("EI iterations cannot exceed max iterations"));
        }
        if self.gp_restarts == 0 {
            return Err(Error::domain("GP training needs at least one start"));
        }
        if matches!(self.strategy_override, Some(Strategy::Indeterminate)) {
            return Err(Error::domain("the strategy override must be single or multi"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Acquisition kind for a 1-based optimization iteration.
    pub fn acquisition_kind(&self, iteration: u32) -> AcquisitionKind {
        if iteration <= self.ei_iterations {
            AcquisitionKind::ExpectedImprovement
        } else {
            AcquisitionKind::PosteriorMean
        }
    }
}

const TAG_DESIGN: u64 = 1;
const TAG_GA: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_CLUSTER: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one purpose at one position in the campaign.
pub fn derive_seed(base: u64, tag: u64, iteration: u64, device: u64) -> u64 {
    splitmix(splitmix(splitmix(splitmix(base) ^ tag) ^ iteration) ^ device)
}

/// Box midpoint followed by distinct uniform random points.
pub fn initial_design(config: &CampaignConfig) -> Result<Vec<ParameterPoint>> {
    config.bounds.validate()?;
    let b = &config.bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_DESIGN, 0, 0));
    let mid = b.midpoint();
    let mut seen = BTreeSet::from([(mid.flow.to_bits(), mid.layer_height.to_bits())]);
    let mut points = vec![mid];
    while points.len() < config.initial_sets {
        let p = ParameterPoint::new(rng.random_range(b.flow_lb..=b.flow_ub), rng.random_range(b.lh_lb..=b.lh_ub));
        if seen.insert((p.flow.to_bits(), p.layer_height.to_bits())) {
            points.push(p);
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRequest {
    pub device_id: usize,
    pub point: ParameterPoint,
    pub repetition_mode: RepetitionMode,
    pub replicate_index: u32,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub measured_weight: f64,
    pub expected_weight: f64,
    pub timestamp: Option<String>,
}

/// Source of weighings: a simulator or a real lab.
pub trait MeasurementOracle {
    /// `dataset` holds every record committed so far.
    fn measure(&mut self, dataset: &Dataset, request: &MeasurementRequest) -> Result<Measurement>;
}

/// Answers requests from a simulated fleet. The noise counter of a device
/// is its number of committed records, so the oracle itself is stateless.
#[derive(Debug, Clone)]
pub struct SimulatorOracle {
    pub fleet: FleetSimConfig,
}

impl SimulatorOracle {
    pub fn new(fleet: FleetSimConfig) -> Result<Self> {
        fleet.validate()?;
        Ok(Self { fleet })
    }
}

impl MeasurementOracle for SimulatorOracle {
    fn measure(&mut self, dataset: &Dataset, r: &MeasurementRequest) -> Result<Measurement> {
        let counter = dataset.device_records(r.device_id).count() as u64;
        Ok(Measurement {
            measured_weight: simulate_measurement(&self.fleet, r.device_id, r.point, r.repetition_mode, counter)?,
            expected_weight: self.fleet.expected_weight,
            timestamp: None,
        })
    }
}

pub const REQUEST_COLUMNS: [&str; 6] = ["device_id", "flow", "layer_height", "repetition_mode", "replicate_index", "iteration"];

/// Lab-in-the-loop oracle. Each request is appended to a requests CSV;
/// the oracle then polls a measurements CSV (ingestion schema) until a row
/// with the same device, point, replicate index and iteration appears.
#[derive(Debug, Clone)]
pub struct WatchFileOracle {
    pub measurements: PathBuf,
    pub requests: PathBuf,
    pub timeout: Duration,
    pub poll_interval: Duration,
}

impl WatchFileOracle {
    pub fn new(measurements: impl Into<PathBuf>, timeout: Duration) -> Self {
        let measurements = measurements.into();
        let mut requests = measurements.clone().into_os_string();
        requests.push(".requests.csv");
        Self {
            measurements,
            requests: requests.into(),
            timeout,
            poll_interval: Duration::from_millis(200),
        }
    }

    fn append_request(&self, r: &MeasurementRequest) -> Result<()> {
        let fresh = !self.requests.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.requests)
            .map_err(|e| Error::io(&self.requests, e))?;
        let mut w = csv::Writer::from_writer(file);
        if fresh {
            w.write_record(REQUEST_COLUMNS)?;
        }
        w.write_record([
            r.device_id.to_string(),
            r.point.flow.to_string(),
            r.point.layer_height.to_string(),
            r.repetition_mode.to_string(),
            r.replicate_index.to_string(),
            r.iteration.to_string(),
        ])?;
        w.flush().map_err(|e| Error::io(&self.requests, e))
    }

    fn find(&self, dataset: &Dataset, r: &MeasurementRequest) -> Option<Measurement> {
        let content = std::fs::read(&self.measurements).ok()?;
        let rows = match ingest_reader(content.as_slice(), dataset.fleet_size, dataset.bounds) {
            Ok(ds) => ds.records,
            Err(e) => {
                log::debug!("measurement file not readable yet: {e}");
                return None;
            }
        };
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        rows.into_iter()
            .find(|x| {
                x.device_id == r.device_id
                    && x.iteration == r.iteration
                    && x.replicate_index == r.replicate_index
                    && x.repetition_mode == r.repetition_mode
                    && close(x.point.flow, r.point.flow)
                    && close(x.point.layer_height, r.point.layer_height)
            })
            .map(|x| Measurement {
                measured_weight: x.measured_weight,
                expected_weight: x.expected_weight,
                timestamp: x.timestamp,
            })
    }
}

impl MeasurementOracle for WatchFileOracle {
    fn measure(&mut self, dataset: &Dataset, r: &MeasurementRequest) -> Result<Measurement> {
        self.append_request(r)?;
        let start = Instant::now();
        loop {
            if let Some(m) = self.find(dataset, r) {
                return Ok(m);
            }
            if start.elapsed() >= self.timeout {
                return Err(Error::OracleTimeout {
                    device_id: r.device_id,
                    iteration: r.iteration as usize,
                    seconds: self.timeout.as_secs_f64(),
                });
            }
            std::thread::sleep(self.poll_interval);
        }
    }
}

/// Every artifact of the noise analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAnalysis {
    pub features: FeatureMatrix,
    pub kdes: Vec<KdeSummary>,
    pub boxes: Vec<BoxSummary>,
    pub reports: Vec<DivergenceReport>,
    pub clustering: ClusteringResult,
    pub association: AssociationReport,
    pub decision: StrategyDecision,
}

/// Noise analysis over the initial-design (iteration 0) measurements.
pub fn run_noise_phase(dataset: &Dataset, config: &CampaignConfig) -> Result<NoiseAnalysis> {
    let initial = Dataset {
        records: dataset.records.iter().filter(|r| r.iteration == 0).cloned().collect(),
        ..dataset.clone()
    };
    analyze_dataset(&initial, config)
}

/// Noise statistics, divergences, clustering and decision over every record
/// of `dataset`. Errors carry the phase that raised them.
pub fn analyze_dataset(dataset: &Dataset, config: &CampaignConfig) -> Result<NoiseAnalysis> {
    let features = run_features(dataset).map_err(|e| e.in_phase("noise-stats"))?;
    let samples: Vec<Vec<f64>> = (0..dataset.fleet_size).map(|d| dataset.device_weights(d)).collect();
    let kdes = samples
        .iter()
        .enumerate()
        .map(|(d, w)| kde(d, w, BandwidthRule::Scott))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_phase("noise-stats"))?;
    let boxes = box_summaries(&features).map_err(|e| e.in_phase("noise-stats"))?;
    let mut reports = pairwise_reports(&samples, &config.histogram).map_err(|e| e.in_phase("divergence"))?;
    let cluster_seed = derive_seed(config.seed, TAG_CLUSTER, 0, 0);
    let k = campaign_k(&features, dataset.fleet_size, cluster_seed, &config.clustering).map_err(|e| e.in_phase("clustering"))?;
    let clustering = kmeans(&features, k, cluster_seed, &config.clustering).map_err(|e| e.in_phase("clustering"))?;
    let assoc = association(&clustering.assignments, &features.device_labels()).map_err(|e| e.in_phase("clustering"))?;
    let decision = decide(&reports, Some(&assoc), &config.thresholds).map_err(|e| e.in_phase("decision"))?;
    for r in &mut reports {
        r.votes = Some(PairVotes::of(r, &config.thresholds).map_err(|e| e.in_phase("decision"))?);
    }
    Ok(NoiseAnalysis {
        features,
        kdes,
        boxes,
        reports,
        clustering,
        association: assoc,
        decision,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricScope {
    Mean,
    Device(usize),
}

impl std::fmt::Display for MetricScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricScope::Mean => f.write_str("mean"),
            MetricScope::Device(d) => write!(f, "device_{d}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
}

/// MSE, RMSE and MAE between paired predictions and realized values.
pub fn compute_metrics(predictions: &[f64], realized: &[f64]) -> Result<ErrorMetrics> {
    if predictions.is_empty() || predictions.len() != realized.len() {
        return Err(Error::domain("metrics need equal, non-empty prediction and realization lists"));
    }
    let n = predictions.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, r) in predictions.iter().zip(realized) {
        se += (p - r).powi(2);
        ae += (p - r).abs();
    }
    let mse = se / n;
    Ok(ErrorMetrics {
        mse,
        rmse: mse.sqrt(),
        mae: ae / n,
    })
}

/// Error metrics over every optimization measurement in scope up to and
/// including `iteration`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub iteration: u32,
    pub scope: MetricScope,
    pub count: usize,
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
}

/// One optimization measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub device_id: usize,
    /// Position within the batch (0 in single-device mode).
    pub priority: usize,
    pub point: ParameterPoint,
    pub acquisition: AcquisitionKind,
    pub acquisition_value: f64,
    /// Posterior mean of ΔW at the point before measuring.
    pub predicted_delta_w: f64,
    pub measured_weight: f64,
    pub expected_weight: f64,
    pub delta_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    pub schema_version: u32,
    pub config: CampaignConfig,
    pub dataset: Dataset,
    pub initial_design_complete: bool,
    pub analysis: Option<NoiseAnalysis>,
    pub strategy: Option<Strategy>,
    /// One model per device in single-device mode, one pooled model in
    /// multi-device mode.
    pub models: Vec<GpModel>,
    /// Completed optimization iterations per device.
    pub device_iterations: Vec<u32>,
    pub log: Vec<IterationRecord>,
    /// Snapshots grouped by iteration, in iteration order.
    pub metrics: Vec<Vec<MetricSnapshot>>,
    pub partial_iterations: Vec<u32>,
    pub warnings: Vec<String>,
}

impl CampaignState {
    pub fn new(config: CampaignConfig) -> Result<Self> {
        config.validate()?;
        let dataset = Dataset::empty(config.fleet_size, config.bounds)?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            device_iterations: vec![0; config.fleet_size],
            config,
            dataset,
            initial_design_complete: false,
            analysis: None,
            strategy: None,
            models: Vec::new(),
            log: Vec::new(),
            metrics: Vec::new(),
            partial_iterations: Vec::new(),
            warnings: Vec::new(),
        })
    }

    /// Completed iterations: the minimum over devices.
    pub fn iteration(&self) -> u32 {
        self.device_iterations.iter().copied().min().unwrap_or(0)
    }

    pub fn is_complete(&self) -> bool {
        self.strategy.is_some() && self.iteration() >= self.config.max_iterations
    }

    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    /// Measures every initial parameter set on every device. Resumes after
    /// the records already present.
    pub fn run_initial_design(&mut self, oracle: &mut dyn MeasurementOracle) -> Result<()> {
        if self.initial_design_complete {
            return Ok(());
        }
        let points = initial_design(&self.config)?;
        let mut k = 0;
        for point in &points {
            for device_id in 0..self.config.fleet_size {
                for rep in 0..self.config.replicates {
                    if k < self.dataset.len() {
                        k += 1;
                        continue;
                    }
                    let req = MeasurementRequest {
                        device_id,
                        point: *point,
                        repetition_mode: RepetitionMode::Simultaneous,
                        replicate_index: rep,
                        iteration: 0,
                    };
                    let m = oracle.measure(&self.dataset, &req).map_err(|e| e.in_phase("initial-design"))?;
                    self.dataset.push(record_from(&req, &m)).map_err(|e| e.in_phase("initial-design"))?;
                    k += 1;
                }
            }
        }
        self.initial_design_complete = true;
        Ok(())
    }

    /// Runs the noise phase and fixes the strategy, unless an override is
    /// configured, in which case the decision is skipped.
    pub fn decide_strategy(&mut self) -> Result<Strategy> {
        if let Some(s) = self.strategy {
            return Ok(s);
        }
        if let Some(s) = self.config.strategy_override {
            self.warn(format!("strategy override '{s}' given; skipping the decision phase"));
            self.strategy = Some(s);
            return Ok(s);
        }
        if self.config.fleet_size == 1 {
            self.warn("single-device fleet; nothing to compare, optimizing it alone".into());
            self.strategy = Some(Strategy::SingleDevice);
            return Ok(Strategy::SingleDevice);
        }
        let analysis = run_noise_phase(&self.dataset, &self.config)?;
        let strategy = analysis.decision.resolve(self.config.fallback).map_err(|e| e.in_phase("decision"))?;
        if analysis.decision.strategy == Strategy::Indeterminate {
            self.warn(format!("decision indeterminate; using fallback '{strategy}'"));
        }
        self.analysis = Some(analysis);
        self.strategy = Some(strategy);
        Ok(strategy)
    }

    fn train_opts(&self, iteration: u32, device: usize) -> TrainOptions {
        TrainOptions {
            restarts: self.config.gp_restarts,
            seed: derive_seed(self.config.seed, TAG_TRAIN, iteration as u64, device as u64),
            ..Default::default()
        }
    }

    fn single_data(dataset: &Dataset, device_id: usize) -> Result<TrainingData> {
        let recs: Vec<&ExperimentRecord> = dataset.device_records(device_id).collect();
        let pts: Vec<ParameterPoint> = recs.iter().map(|r| r.point).collect();
        TrainingData::single(&pts, recs.iter().map(|r| r.delta_w()).collect())
    }

    fn pooled_data(dataset: &Dataset) -> Result<TrainingData> {
        let pts: Vec<ParameterPoint> = dataset.records.iter().map(|r| r.point).collect();
        let devs: Vec<usize> = dataset.records.iter().map(|r| r.device_id).collect();
        let y = dataset.records.iter().map(|r| r.delta_w()).collect();
        TrainingData::multi(&pts, &devs, y, dataset.fleet_size)
    }

    fn fit_single(&self, dataset: &Dataset, device_id: usize, iteration: u32, previous: Option<&GpModel>) -> Result<GpModel> {
        let data = Self::single_data(dataset, device_id)?;
        let (init, bounds) = match previous {
            Some(m) => (m.hps().clone(), m.bounds().clone()),
            None => (Hyperparameters::initial(TaskMode::Single), HpBounds::default_for(TaskMode::Single)),
        };
        let opts = self.train_opts(iteration, device_id);
        let (model, _) = GpModel::fit(data, bounds, &init, &opts)?;
        Ok(relax_bounds_and_retrain(&model, &opts)?.model)
    }

    fn fit_pooled(&self, dataset: &Dataset, iteration: u32, previous: Option<&GpModel>) -> Result<GpModel> {
        let mode = TaskMode::Multi {
            tasks: dataset.fleet_size,
        };
        let data = Self::pooled_data(dataset)?;
        let (init, bounds) = match previous {
            Some(m) => (m.hps().clone(), m.bounds().clone()),
            None => (Hyperparameters::initial(mode), HpBounds::default_for(mode)),
        };
        Ok(GpModel::fit(data, bounds, &init, &self.train_opts(iteration, 0))?.0)
    }

    /// Trains the initial surrogate(s) for the chosen strategy.
    pub fn fit_models(&mut self) -> Result<()> {
        if !self.models.is_empty() {
            return Ok(());
        }
        let strategy = self.strategy.ok_or_else(|| Error::domain("strategy not decided yet"))?;
        self.models = match strategy {
            Strategy::SingleDevice => (0..self.config.fleet_size)
                .map(|d| self.fit_single(&self.dataset, d, 0, None))
                .collect::<Result<_>>(),
            Strategy::MultiDevice => Ok(vec![self.fit_pooled(&self.dataset, 0, None)?]),
            Strategy::Indeterminate => Err(Error::Indeterminate),
        }
        .map_err(|e| e.in_phase("gp"))?;
        Ok(())
    }

    /// Initial design, decision and model fitting.
    pub fn prepare(&mut self, oracle: &mut dyn MeasurementOracle) -> Result<Strategy> {
        self.run_initial_design(oracle)?;
        let s = self.decide_strategy()?;
        self.fit_models()?;
        Ok(s)
    }

    fn best_delta_w(&self, device: Option<usize>) -> f64 {
        self.dataset
            .records
            .iter()
            .filter(|r| device.is_none_or(|d| r.device_id == d))
            .map(|r| r.delta_w())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn spec_for(&self, iteration: u32, device: Option<usize>) -> AcquisitionSpec {
        match self.config.acquisition_kind(iteration) {
            AcquisitionKind::ExpectedImprovement => AcquisitionSpec::expected_improvement(self.best_delta_w(device)),
            AcquisitionKind::PosteriorMean => AcquisitionSpec::posterior_mean(),
        }
    }

    fn snapshot(&self, iteration: u32, scope: MetricScope) -> Option<MetricSnapshot> {
        let (p, r): (Vec<f64>, Vec<f64>) = self
            .log
            .iter()
            .filter(|x| x.iteration <= iteration && (scope == MetricScope::Mean || scope == MetricScope::Device(x.device_id)))
            .map(|x| (x.predicted_delta_w, x.delta_w))
            .unzip();
        let m = compute_metrics(&p, &r).ok()?;
        Some(MetricSnapshot {
            iteration,
            scope,
            count: p.len(),
            mse: m.mse,
            rmse: m.rmse,
            mae: m.mae,
        })
    }

    fn push_snapshot(&mut self, s: MetricSnapshot) {
        let idx = s.iteration as usize - 1;
        while self.metrics.len() <= idx {
            self.metrics.push(Vec::new());
        }
        let slot = &mut self.metrics[idx];
        slot.retain(|x| x.scope != s.scope);
        slot.push(s);
        slot.sort_by_key(|x| x.scope);
    }

    /// One optimization iteration for one device in single-device mode.
    /// On oracle failure the state is left unchanged.
    pub fn step_single(&mut self, device_id: usize, oracle: &mut dyn MeasurementOracle) -> Result<()> {
        if self.strategy != Some(Strategy::SingleDevice) {
            return Err(Error::domain("step_single needs the single-device strategy"));
        }
        let model = self
            .models
            .get(device_id)
            .ok_or_else(|| Error::domain(format!("no model for device {device_id}")))?
            .clone();
        let k = self.device_iterations[device_id] + 1;
        if k > self.config.max_iterations {
            return Err(Error::domain(format!("device {device_id} already ran {} iterations", k - 1)));
        }
        let spec = self.spec_for(k, Some(device_id));
        let ga = self.config.ga.with_seed(derive_seed(self.config.seed, TAG_GA, k as u64, device_id as u64));
        let proposal = propose_single(&model, &self.config.bounds, &spec, &ga).map_err(|e| e.in_phase("acquisition"))?;
        let req = MeasurementRequest {
            device_id,
            point: proposal.point,
            repetition_mode: RepetitionMode::Simultaneous,
            replicate_index: 0,
            iteration: k,
        };
        let m = oracle.measure(&self.dataset, &req)?;
        let record = record_from(&req, &m);
        let mut dataset = self.dataset.clone();
        dataset.push(record.clone())?;
        let next = self.fit_single(&dataset, device_id, k, Some(&model)).map_err(|e| e.in_phase("gp"))?;

        self.dataset = dataset;
        self.models[device_id] = next;
        self.log.push(IterationRecord {
            iteration: k,
            device_id,
            priority: 0,
            point: proposal.point,
            acquisition: spec.kind,
            acquisition_value: proposal.acquisition_value,
            predicted_delta_w: proposal.predicted,
            measured_weight: record.measured_weight,
            expected_weight: record.expected_weight,
            delta_w: record.delta_w(),
        });
        self.device_iterations[device_id] = k;
        if let Some(s) = self.snapshot(k, MetricScope::Device(device_id)) {
            self.push_snapshot(s);
        }
        Ok(())
    }

    /// One batch iteration in multi-device mode. If the oracle fails
    /// mid-batch, completed measurements are kept, the iteration is marked
    /// partial and the error is returned.
    pub fn step_multi(&mut self, oracle: &mut dyn MeasurementOracle) -> Result<()> {
        if self.strategy != Some(Strategy::MultiDevice) {
            return Err(Error::domain("step_multi needs the multi-device strategy"));
        }
        let model = self.models.first().ok_or_else(|| Error::domain("no pooled model"))?.clone();
        let k = self.iteration() + 1;
        if k > self.config.max_iterations {
            return Err(Error::domain("campaign already complete"));
        }
        let n = self.config.fleet_size;
        let spec = self.spec_for(k, None);
        let ga = self.config.ga.with_seed(derive_seed(self.config.seed, TAG_GA, k as u64, 0));
        let batch = propose_batch(&model, &self.config.bounds, &spec, &ga, n).map_err(|e| e.in_phase("acquisition"))?;

        let mut failure = None;
        let mut done = Vec::new();
        for (priority, a) in batch.assignments.iter().enumerate() {
            let req = MeasurementRequest {
                device_id: a.device_id,
                point: a.point,
                repetition_mode: RepetitionMode::Simultaneous,
                replicate_index: 0,
                iteration: k,
            };
            match oracle.measure(&self.dataset, &req) {
                Ok(m) => {
                    let record = record_from(&req, &m);
                    self.dataset.push(record.clone())?;
                    done.push((priority, a.clone(), record));
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        if done.is_empty() {
            return Err(failure.expect("empty batch only on failure"));
        }
        for (priority, a, record) in &done {
            self.log.push(IterationRecord {
                iteration: k,
                device_id: a.device_id,
                priority: *priority,
                point: a.point,
                acquisition: spec.kind,
                acquisition_value: a.acquisition_value,
                predicted_delta_w: a.predicted,
                measured_weight: record.measured_weight,
                expected_weight: record.expected_weight,
                delta_w: record.delta_w(),
            });
        }
        for d in self.device_iterations.iter_mut() {
            *d = k;
        }
        if failure.is_some() {
            self.partial_iterations.push(k);
        }
        let next = self.fit_pooled(&self.dataset, k, Some(&model)).map_err(|e| e.in_phase("gp"))?;
        self.models[0] = next;
        for scope in std::iter::once(MetricScope::Mean).chain((0..n).map(MetricScope::Device)) {
            if let Some(s) = self.snapshot(k, scope) {
                self.push_snapshot(s);
            }
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// One iteration of the chosen strategy: every device lagging behind
    /// steps once in single-device mode; one batch in multi-device mode.
    pub fn run_iteration(&mut self, oracle: &mut dyn MeasurementOracle) -> Result<()> {
        match self.strategy {
            Some(Strategy::SingleDevice) => {
                let k = self.iteration() + 1;
                for d in 0..self.config.fleet_size {
                    if self.device_iterations[d] < k {
                        self.step_single(d, oracle)?;
                    }
                }
                Ok(())
            }
            Some(Strategy::MultiDevice) => self.step_multi(oracle),
            _ => Err(Error::domain("strategy not decided")),
        }
    }

    /// Runs to completion, calling `after_iteration` after every
    /// completed iteration (for checkpointing).
    pub fn run<F>(&mut self, oracle: &mut dyn MeasurementOracle, mut after_iteration: F) -> Result<()>
    where
        F: FnMut(&CampaignState) -> Result<()>,
    {
        self.prepare(oracle)?;
        after_iteration(self)?;
        while !self.is_complete() {
            self.run_iteration(oracle)?;
            after_iteration(self)?;
        }
        Ok(())
    }

    /// First iteration at which a measurement of `device_id` had
    /// `|ΔW| <= tolerance`.
    pub fn first_hit(&self, device_id: usize, tolerance: f64) -> Option<u32> {
        self.log
            .iter()
            .filter(|r| r.device_id == device_id && r.delta_w.abs() <= tolerance)
            .map(|r| r.iteration)
            .min()
    }

    /// Best optimization-phase ΔW of a device up to an iteration.
    pub fn incumbent(&self, device_id: usize, iteration: u32) -> Option<f64> {
        self.log
            .iter()
            .filter(|r| r.device_id == device_id && r.iteration <= iteration)
            .map(|r| r.delta_w)
            .reduce(f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let state: Self = serde_json::from_str(text).map_err(|e| Error::Schema {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        if state.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema {
                path: origin.to_path_buf(),
                message: format!("unsupported schema version {} (expected {SCHEMA_VERSION})", state.schema_version),
            });
        }
        Ok(state)
    }

    /// Writes the checkpoint atomically (temporary file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        std::fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Iteration log: the ingestion columns plus predicted ΔW, acquisition
    /// kind and batch priority.
    pub fn write_iteration_log<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = crate::domain::CSV_COLUMNS.to_vec();
        header.extend(["predicted_delta_w", "delta_w", "acquisition", "acquisition_value", "priority"]);
        w.write_record(&header)?;
        for r in &self.log {
            let rec = ExperimentRecord {
                device_id: r.device_id,
                point: r.point,
                repetition_mode: RepetitionMode::Simultaneous,
                replicate_index: 0,
                measured_weight: r.measured_weight,
                expected_weight: r.expected_weight,
                iteration: r.iteration,
                timestamp: None,
            };
            let mut row: Vec<String> = crate::domain::record_fields(&rec).to_vec();
            row.extend([
                r.predicted_delta_w.to_string(),
                r.delta_w.to_string(),
                r.acquisition.to_string(),
                r.acquisition_value.to_string(),
                r.priority.to_string(),
            ]);
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<iteration log>", e))?;
        Ok(())
    }
}

fn record_from(req: &MeasurementRequest, m: &Measurement) -> ExperimentRecord {
    ExperimentRecord {
        device_id: req.device_id,
        point: req.point,
        repetition_mode: req.repetition_mode,
        replicate_index: req.replicate_index,
        measured_weight: m.measured_weight,
        expected_weight: m.expected_weight,
        iteration: req.iteration,
        timestamp: m.timestamp.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn design_starts_at_midpoint_and_is_distinct() {
        let cfg = CampaignConfig::default();
        let pts = initial_design(&cfg).unwrap();
        assert_eq!(pts[0], ParameterPoint::new(3000.0, 0.4));
        assert_eq!(pts.len(), 25);
        let set: BTreeSet<_> = pts.iter().map(|p| (p.flow.to_bits(), p.layer_height.to_bits())).collect();
        assert_eq!(set.len(), 25);
        assert!(pts.iter().all(|p| cfg.bounds.contains(p)));
        assert_eq!(initial_design(&cfg).unwrap(), pts);
        let one = CampaignConfig {
            initial_sets: 1,
            ..Default::default()
        };
        assert_eq!(initial_design(&one).unwrap(), vec![ParameterPoint::new(3000.0, 0.4)]);
    }

    #[test]
    fn metric_examples() {
        let m = compute_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((m.mse, m.rmse, m.mae), (0.0, 0.0, 0.0));
        let m = compute_metrics(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!((m.mse, m.rmse, m.mae), (1.0, 1.0, 1.0));
        let m = compute_metrics(&[0.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(m.mse, 2.0);
        assert!((m.rmse - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(m.mae, 1.0);
        assert!(compute_metrics(&[], &[]).is_err());
    }

    #[test]
    fn acquisition_switch_rule() {
        let cfg = CampaignConfig::default();
        assert_eq!(cfg.acquisition_kind(11), AcquisitionKind::ExpectedImprovement);
        assert_eq!(cfg.acquisition_kind(12), AcquisitionKind::PosteriorMean);
    }

    #[test]
    fn config_rejects_switch_after_max() {
        let cfg = CampaignConfig {
            ei_iterations: 30,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_position() {
        let a = derive_seed(7, TAG_GA, 1, 0);
        assert_ne!(a, derive_seed(7, TAG_GA, 1, 1));
        assert_ne!(a, derive_seed(7, TAG_GA, 2, 0));
        assert_ne!(a, derive_seed(8, TAG_GA, 1, 0));
        assert_eq!(a, derive_seed(7, TAG_GA, 1, 0));
    }
}
