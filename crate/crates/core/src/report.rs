//! Plot-ready CSV series from a campaign checkpoint.
//!
//! `convergence.csv` holds one row per iteration and scope with measured
//! and predicted ΔW; `metrics.csv` holds the cumulative error metrics. Both
//! carry an `after_switch` column that is true once the acquisition has
//! switched to the posterior mean.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::campaign::{CampaignState, IterationRecord, MetricScope};
use crate::decision::Strategy;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub iteration: u32,
    pub scope: MetricScope,
    pub flow: Option<f64>,
    pub layer_height: Option<f64>,
    pub measured_delta_w: f64,
    pub predicted_delta_w: f64,
    /// Best measured ΔW in scope so far.
    pub best_delta_w: f64,
    pub acquisition: String,
    pub after_switch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: u32,
    pub scope: MetricScope,
    pub count: usize,
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub after_switch: bool,
}

/// Scopes reported for a campaign: one per device, plus the fleet mean in
/// multi-device mode.
pub fn scopes(state: &CampaignState) -> Vec<MetricScope> {
    let devices = (0..state.config.fleet_size).map(MetricScope::Device);
    match state.strategy {
        Some(Strategy::MultiDevice) => std::iter::once(MetricScope::Mean).chain(devices).collect(),
        _ => devices.collect(),
    }
}

fn in_scope(r: &IterationRecord, scope: MetricScope) -> bool {
    match scope {
        MetricScope::Mean => true,
        MetricScope::Device(d) => r.device_id == d,
    }
}

pub fn convergence_rows(state: &CampaignState) -> Vec<ConvergenceRow> {
    let mut rows = Vec::new();
    for scope in scopes(state) {
        let mut best = f64::NEG_INFINITY;
        let last = state.log.iter().filter(|r| in_scope(r, scope)).map(|r| r.iteration).max().unwrap_or(0);
        for k in 1..=last {
            let recs: Vec<&IterationRecord> = state.log.iter().filter(|r| r.iteration == k && in_scope(r, scope)).collect();
            if recs.is_empty() {
                continue;
            }
            let n = recs.len() as f64;
            let measured = recs.iter().map(|r| r.delta_w).sum::<f64>() / n;
            let predicted = recs.iter().map(|r| r.predicted_delta_w).sum::<f64>() / n;
            best = recs.iter().map(|r| r.delta_w).fold(best, f64::max);
            let (flow, layer_height) = match scope {
                MetricScope::Mean => (None, None),
                MetricScope::Device(_) => (Some(recs[0].point.flow), Some(recs[0].point.layer_height)),
            };
            rows.push(ConvergenceRow {
                iteration: k,
                scope,
                flow,
                layer_height,
                measured_delta_w: measured,
                predicted_delta_w: predicted,
                best_delta_w: best,
                acquisition: recs[0].acquisition.to_string(),
                after_switch: k > state.config.ei_iterations,
            });
        }
    }
    rows
}

pub fn metric_rows(state: &CampaignState) -> Vec<MetricRow> {
    let mut rows: Vec<MetricRow> = state
        .metrics
        .iter()
        .flatten()
        .map(|s| MetricRow {
            iteration: s.iteration,
            scope: s.scope,
            count: s.count,
            mse: s.mse,
            rmse: s.rmse,
            mae: s.mae,
            after_switch: s.iteration > state.config.ei_iterations,
        })
        .collect();
    rows.sort_by_key(|r| (r.scope, r.iteration));
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn convergence_csv(state: &CampaignState) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "iteration",
        "scope",
        "flow",
        "layer_height",
        "measured_delta_w",
        "predicted_delta_w",
        "best_delta_w",
        "acquisition",
        "after_switch",
    ])?;
    for r in convergence_rows(state) {
        w.write_record([
            r.iteration.to_string(),
            r.scope.to_string(),
            opt(r.flow),
            opt(r.layer_height),
            r.measured_delta_w.to_string(),
            r.predicted_delta_w.to_string(),
            r.best_delta_w.to_string(),
            r.acquisition,
            r.after_switch.to_string(),
        ])?;
    }
    finish(w)
}

pub fn metrics_csv(state: &CampaignState) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "scope", "count", "mse", "rmse", "mae", "after_switch"])?;
    for r in metric_rows(state) {
        w.write_record([
            r.iteration.to_string(),
            r.scope.to_string(),
            r.count.to_string(),
            r.mse.to_string(),
            r.rmse.to_string(),
            r.mae.to_string(),
            r.after_switch.to_string(),
        ])?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::domain(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::domain(e.to_string()))
}

/// Writes `convergence.csv` and `metrics.csv` into `dir`.
pub fn write_report(state: &CampaignState, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for (name, body) in [("convergence.csv", convergence_csv(state)?), ("metrics.csv", metrics_csv(state)?)] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        out.push(path);
    }
    Ok(out)
}
