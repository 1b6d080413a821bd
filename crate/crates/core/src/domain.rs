//! Experiment data model: parameter space, measurement records, the weight
//! deviation objective and CSV ingestion.
//!
//! The CSV schema is
//!
//! ```text
//! device_id,flow,layer_height,repetition_mode,replicate_index,measured_weight,expected_weight,iteration,timestamp
//! ```
//!
//! Lines starting with `#` are comments. A comment of the form
//! `# device 0: P1` registers a human-readable name for a dense device id.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IngestError, Result};

pub const CSV_COLUMNS: [&str; 9] = [
    "device_id",
    "flow",
    "layer_height",
    "repetition_mode",
    "replicate_index",
    "measured_weight",
    "expected_weight",
    "iteration",
    "timestamp",
];

/// A process setting: flow multiplier and layer height in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    pub flow: f64,
    pub layer_height: f64,
}

impl ParameterPoint {
    pub fn new(flow: f64, layer_height: f64) -> Self {
        Self { flow, layer_height }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.flow, self.layer_height]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self::new(x[0], x[1])
    }

    pub fn is_finite(&self) -> bool {
        self.flow.is_finite() && self.layer_height.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterBounds {
    pub flow_lb: f64,
    pub flow_ub: f64,
    pub lh_lb: f64,
    pub lh_ub: f64,
}

impl Default for ParameterBounds {
    fn default() -> Self {
        Self {
            flow_lb: 1000.0,
            flow_ub: 5000.0,
            lh_lb: 0.2,
            lh_ub: 0.6,
        }
    }
}

impl ParameterBounds {
    pub fn new(flow_lb: f64, flow_ub: f64, lh_lb: f64, lh_ub: f64) -> Result<Self> {
        let b = Self {
            flow_lb,
            flow_ub,
            lh_lb,
            lh_ub,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.flow_lb, self.flow_ub, self.lh_lb, self.lh_ub];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("parameter bounds must be finite"));
        }
        if self.flow_lb >= self.flow_ub || self.lh_lb >= self.lh_ub {
            return Err(Error::domain("each lower bound must be below its upper bound"));
        }
        Ok(())
    }

    pub fn contains(&self, p: &ParameterPoint) -> bool {
        p.is_finite()
            && p.flow >= self.flow_lb
            && p.flow <= self.flow_ub
            && p.layer_height >= self.lh_lb
            && p.layer_height <= self.lh_ub
    }

    pub fn midpoint(&self) -> ParameterPoint {
        ParameterPoint::new(
            0.5 * (self.flow_lb + self.flow_ub),
            0.5 * (self.lh_lb + self.lh_ub),
        )
    }

    pub fn lower(&self) -> [f64; 2] {
        [self.flow_lb, self.lh_lb]
    }

    pub fn upper(&self) -> [f64; 2] {
        [self.flow_ub, self.lh_ub]
    }

    pub fn widths(&self) -> [f64; 2] {
        [self.flow_ub - self.flow_lb, self.lh_ub - self.lh_lb]
    }

    pub fn clamp(&self, p: ParameterPoint) -> ParameterPoint {
        ParameterPoint::new(
            p.flow.clamp(self.flow_lb, self.flow_ub),
            p.layer_height.clamp(self.lh_lb, self.lh_ub),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepetitionMode {
    Sequential,
    Simultaneous,
}

impl RepetitionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RepetitionMode::Sequential => "sequential",
            RepetitionMode::Simultaneous => "simultaneous",
        }
    }
}

impl fmt::Display for RepetitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RepetitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sequential" => Ok(RepetitionMode::Sequential),
            "simultaneous" => Ok(RepetitionMode::Simultaneous),
            other => Err(Error::domain(format!("unknown repetition mode {other:?}"))),
        }
    }
}

/// One printed specimen and its weighing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub device_id: usize,
    pub point: ParameterPoint,
    pub repetition_mode: RepetitionMode,
    pub replicate_index: u32,
    pub measured_weight: f64,
    pub expected_weight: f64,
    /// 0 marks the initial design; BO iterations count from 1.
    pub iteration: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl ExperimentRecord {
    /// Weight deviation objective of this record.
    pub fn delta_w(&self) -> f64 {
        -(1.0 - self.measured_weight / self.expected_weight).abs()
    }
}

/// Weight deviation objective: `-|1 - measured / expected|`.
///
/// Always `<= 0`, and `0` exactly when the measured weight equals the
/// expected one. Larger is better.
pub fn objective_delta_w(measured: f64, expected: f64) -> Result<f64> {
    if !expected.is_finite() || expected <= 0.0 {
        return Err(Error::domain(format!(
            "expected weight must be positive and finite, got {expected}"
        )));
    }
    if !measured.is_finite() || measured < 0.0 {
        return Err(Error::domain(format!(
            "measured weight must be non-negative and finite, got {measured}"
        )));
    }
    Ok(-(1.0 - measured / expected).abs())
}

/// Expected specimen weight in grams from CAD volume (cm³) and material
/// density (g/cm³).
pub fn expected_weight(volume: f64, density: f64) -> Result<f64> {
    if !(volume.is_finite() && volume > 0.0) || !(density.is_finite() && density > 0.0) {
        return Err(Error::domain(format!(
            "volume and density must be positive, got {volume} and {density}"
        )));
    }
    Ok(volume * density)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<ExperimentRecord>,
    pub fleet_size: usize,
    pub bounds: ParameterBounds,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub device_names: BTreeMap<usize, String>,
}

impl Dataset {
    pub fn empty(fleet_size: usize, bounds: ParameterBounds) -> Result<Self> {
        if fleet_size == 0 {
            return Err(Error::domain("fleet size must be at least 1"));
        }
        bounds.validate()?;
        Ok(Self {
            records: Vec::new(),
            fleet_size,
            bounds,
            device_names: BTreeMap::new(),
        })
    }

    pub fn new(
        records: Vec<ExperimentRecord>,
        fleet_size: usize,
        bounds: ParameterBounds,
    ) -> Result<Self> {
        let mut ds = Self::empty(fleet_size, bounds)?;
        for r in records {
            ds.push(r)?;
        }
        Ok(ds)
    }

    /// Appends a record after checking it against the dataset invariants.
    pub fn push(&mut self, record: ExperimentRecord) -> Result<()> {
        self.check(&record)?;
        self.records.push(record);
        Ok(())
    }

    fn check(&self, r: &ExperimentRecord) -> Result<()> {
        if r.device_id >= self.fleet_size {
            return Err(Error::domain(format!(
                "device_id {} outside fleet of {}",
                r.device_id, self.fleet_size
            )));
        }
        if !self.bounds.contains(&r.point) {
            return Err(Error::domain(format!("point {:?} outside bounds", r.point)));
        }
        for (name, w) in [("measured", r.measured_weight), ("expected", r.expected_weight)] {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::domain(format!("{name} weight must be positive, got {w}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn device_records(&self, device_id: usize) -> impl Iterator<Item = &ExperimentRecord> {
        self.records.iter().filter(move |r| r.device_id == device_id)
    }

    /// All measured weights of one device, in record order.
    pub fn device_weights(&self, device_id: usize) -> Vec<f64> {
        self.device_records(device_id)
            .map(|r| r.measured_weight)
            .collect()
    }

    /// Measured weights of the initial design (iteration 0), one vector per
    /// device.
    pub fn initial_weights_by_device(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.fleet_size];
        for r in self.records.iter().filter(|r| r.iteration == 0) {
            out[r.device_id].push(r.measured_weight);
        }
        out
    }

    pub fn device_name(&self, device_id: usize) -> String {
        self.device_names
            .get(&device_id)
            .cloned()
            .unwrap_or_else(|| format!("device_{device_id}"))
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        write_csv(&self.records, &self.device_names, writer)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_csv_writer(std::io::BufWriter::new(file))
    }
}

/// Writes records in the ingestion schema, preceded by a device-name comment
/// table when names are known.
pub fn write_csv<W: Write>(
    records: &[ExperimentRecord],
    device_names: &BTreeMap<usize, String>,
    mut writer: W,
) -> Result<()> {
    for (id, name) in device_names {
        writeln!(writer, "# device {id}: {name}").map_err(|e| Error::io("<csv>", e))?;
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.write_record(record_fields(r))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub(crate) fn record_fields(r: &ExperimentRecord) -> [String; 9] {
    [
        r.device_id.to_string(),
        r.point.flow.to_string(),
        r.point.layer_height.to_string(),
        r.repetition_mode.to_string(),
        r.replicate_index.to_string(),
        r.measured_weight.to_string(),
        r.expected_weight.to_string(),
        r.iteration.to_string(),
        r.timestamp.clone().unwrap_or_default(),
    ]
}

pub fn ingest_csv(
    path: impl AsRef<Path>,
    fleet_size: usize,
    bounds: ParameterBounds,
) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, fleet_size, bounds)
}

/// Parses and validates CSV content. Comment lines are scanned for the
/// device-name table before the CSV reader skips them.
pub fn ingest_reader<R: Read>(
    mut reader: R,
    fleet_size: usize,
    bounds: ParameterBounds,
) -> Result<Dataset> {
    let mut content = String::new();
    reader
        .read_to_string(&mut content)
        .map_err(|e| Error::io("<csv>", e))?;
    let mut ds = Dataset::empty(fleet_size, bounds)?;
    ds.device_names = parse_device_names(&content);

    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(content.as_bytes());
    let headers = rdr.headers()?.clone();
    let mut index = [0usize; 9];
    for (slot, name) in index.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))?;
    }

    for result in rdr.records() {
        let rec = result?;
        let row = rec.position().map(|p| p.line()).unwrap_or(0);
        let record = parse_row(&rec, &index, row)?;
        if record.device_id >= fleet_size {
            return Err(IngestError::UnknownDevice {
                row,
                device_id: record.device_id,
                fleet_size,
            }
            .into());
        }
        if !bounds.contains(&record.point) {
            return Err(IngestError::OutOfBounds {
                row,
                flow: record.point.flow,
                layer_height: record.point.layer_height,
            }
            .into());
        }
        ds.records.push(record);
    }
    if ds.records.is_empty() {
        log::warn!("CSV input contains a header but no records");
    }
    Ok(ds)
}

fn parse_device_names(content: &str) -> BTreeMap<usize, String> {
    let mut names = BTreeMap::new();
    for line in content.lines() {
        let Some(rest) = line.trim().strip_prefix('#') else {
            continue;
        };
        let Some(rest) = rest.trim().strip_prefix("device") else {
            continue;
        };
        if let Some((id, name)) = rest.split_once(':') {
            if let Ok(id) = id.trim().parse::<usize>() {
                names.insert(id, name.trim().to_string());
            }
        }
    }
    names
}

fn parse_row(rec: &csv::StringRecord, index: &[usize; 9], row: u64) -> Result<ExperimentRecord> {
    let field = |i: usize| -> Result<&str, IngestError> {
        rec.get(index[i]).ok_or_else(|| IngestError::Malformed {
            row,
            message: format!("missing field `{}`", CSV_COLUMNS[i]),
        })
    };
    fn num<T: FromStr>(row: u64, column: &str, raw: &str) -> Result<T, IngestError> {
        raw.parse::<T>().map_err(|_| IngestError::UnparsableNumber {
            row,
            column: column.to_string(),
            value: raw.to_string(),
        })
    }
    let real = |i: usize| -> Result<f64, IngestError> {
        let v: f64 = num(row, CSV_COLUMNS[i], field(i)?)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(IngestError::UnparsableNumber {
                row,
                column: CSV_COLUMNS[i].to_string(),
                value: field(i)?.to_string(),
            })
        }
    };

    let device_id: usize = num(row, CSV_COLUMNS[0], field(0)?)?;
    let flow = real(1)?;
    let layer_height = real(2)?;
    let mode_raw = field(3)?;
    let repetition_mode = mode_raw
        .parse::<RepetitionMode>()
        .map_err(|_| IngestError::UnknownMode {
            row,
            value: mode_raw.to_string(),
        })?;
    let replicate_index: u32 = num(row, CSV_COLUMNS[4], field(4)?)?;
    let measured_weight = real(5)?;
    let expected_weight = real(6)?;
    for (i, w) in [(5, measured_weight), (6, expected_weight)] {
        if w <= 0.0 {
            return Err(IngestError::InvalidWeight {
                row,
                column: CSV_COLUMNS[i].to_string(),
                value: w,
            }
            .into());
        }
    }
    let iteration: u32 = num(row, CSV_COLUMNS[7], field(7)?)?;
    let ts = rec.get(index[8]).unwrap_or("");
    Ok(ExperimentRecord {
        device_id,
        point: ParameterPoint::new(flow, layer_height),
        repetition_mode,
        replicate_index,
        measured_weight,
        expected_weight,
        iteration,
        timestamp: (!ts.is_empty()).then(|| ts.to_string()),
    })
}
