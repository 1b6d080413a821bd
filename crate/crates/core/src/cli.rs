//! Command-line interface.
//!
//! Exit codes: 0 success, 2 input or schema error, 3 indeterminate
//! decision without a fallback, 4 oracle timeout, 1 any other failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::campaign::{analyze_dataset, CampaignConfig, CampaignState, MeasurementOracle, SimulatorOracle, WatchFileOracle};
use crate::clustering::{rows_to_csv, AssociationReport};
use crate::decision::{decide, Strategy, StrategyDecision};
use crate::divergence::{reports_to_csv, DivergenceReport};
use crate::domain::{ingest_csv, Dataset};
use crate::error::{Error, Result};
use crate::report::write_report;
use crate::simulator::FleetSimConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INDETERMINATE: i32 = 3;
pub const EXIT_TIMEOUT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "noiseopt", version, about = "Noise-aware single- vs multi-device Bayesian optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// Campaign configuration JSON; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fleet_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a measurement CSV and print a per-device summary.
    Ingest {
        input: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        /// Write the normalized CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Noise statistics, divergences and clustering for a measurement CSV.
    Analyze {
        input: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Strategy decision from an analysis directory.
    Decide {
        bundle: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        /// Strategy used when the decision is indeterminate.
        #[arg(long)]
        fallback: Option<Strategy>,
        /// Decision JSON path (default: <bundle>/decision.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full campaign against a simulated fleet or a watched measurement file.
    Campaign {
        /// `sim:heterogeneous`, `sim:homogeneous`, `sim:<fleet.json>` or
        /// `watch:<measurements.csv>`.
        #[arg(long)]
        oracle: String,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        out: PathBuf,
        /// Skip the decision and force a strategy.
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        fallback: Option<Strategy>,
        #[arg(long)]
        max_iterations: Option<u32>,
        /// Continue from `<out>/state.json`.
        #[arg(long)]
        resume: bool,
        /// Stop (with a checkpoint) after this many completed iterations.
        #[arg(long)]
        stop_after: Option<u32>,
        /// Seconds to wait for each watched measurement.
        #[arg(long, default_value_t = 3600.0)]
        timeout: f64,
    },
    /// Simulate the initial design for a fleet and write the measurements.
    Simulate {
        /// `heterogeneous`, `homogeneous` or a fleet JSON path.
        #[arg(long, default_value = "heterogeneous")]
        preset: String,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write the fleet configuration JSON here.
        #[arg(long)]
        fleet_out: Option<PathBuf>,
    },
    /// Plot-data CSVs from a campaign checkpoint.
    Report {
        state: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Indeterminate => EXIT_INDETERMINATE,
        Error::OracleTimeout { .. } => EXIT_TIMEOUT,
        Error::Training(_) | Error::Oracle(_) => EXIT_FAILURE,
        _ => EXIT_INPUT,
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            exit_code(&e)
        }
    }
}

fn config_from(common: &CommonArgs) -> Result<CampaignConfig> {
    let mut cfg = match &common.config {
        Some(p) => CampaignConfig::load(p)?,
        None => CampaignConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.fleet_size {
        cfg.fleet_size = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Ingest { input, common, out } => cmd_ingest(&input, &common, out.as_deref()),
        Command::Analyze { input, common, out } => cmd_analyze(&input, &common, &out),
        Command::Decide {
            bundle,
            common,
            fallback,
            out,
        } => cmd_decide(&bundle, &common, fallback, out.as_deref()),
        Command::Campaign {
            oracle,
            common,
            out,
            strategy,
            fallback,
            max_iterations,
            resume,
            stop_after,
            timeout,
        } => {
            let mut cfg = config_from(&common)?;
            if strategy.is_some() {
                cfg.strategy_override = strategy;
            }
            if fallback.is_some() {
                cfg.fallback = fallback;
            }
            if let Some(m) = max_iterations {
                cfg.max_iterations = m;
                cfg.ei_iterations = cfg.ei_iterations.min(m);
            }
            cfg.validate()?;
            let opts = CampaignRun {
                oracle,
                out,
                resume,
                stop_after,
                timeout: Duration::from_secs_f64(timeout.max(0.0)),
            };
            cmd_campaign(cfg, &opts)
        }
        Command::Simulate {
            preset,
            common,
            out,
            fleet_out,
        } => cmd_simulate(&preset, &common, &out, fleet_out.as_deref()),
        Command::Report { state, out } => {
            let state = CampaignState::load(&state)?;
            for p in write_report(&state, &out)? {
                eprintln!("wrote {}", p.display());
            }
            Ok(EXIT_OK)
        }
    }
}

fn cmd_ingest(input: &Path, common: &CommonArgs, out: Option<&Path>) -> Result<i32> {
    let cfg = config_from(common)?;
    let ds = ingest_csv(input, cfg.fleet_size, cfg.bounds)?;
    for d in 0..ds.fleet_size {
        let n = ds.device_records(d).count();
        println!("{}: {n} records", ds.device_name(d));
    }
    if let Some(out) = out {
        ds.save_csv(out)?;
    }
    Ok(EXIT_OK)
}

/// Writes the full analysis bundle for `dataset` into `out`.
pub fn write_analysis(dataset: &Dataset, cfg: &CampaignConfig, out: &Path) -> Result<StrategyDecision> {
    create_dir(out)?;
    let a = analyze_dataset(dataset, cfg)?;
    write_text(&out.join("features.csv"), &a.features.to_csv_string()?)?;
    write_json(&out.join("kde.json"), &a.kdes)?;
    write_json(&out.join("boxes.json"), &a.boxes)?;
    write_json(&out.join("divergence.json"), &a.reports)?;
    write_text(&out.join("divergence.csv"), &reports_to_csv(&a.reports)?)?;
    write_json(&out.join("clustering.json"), &a.clustering)?;
    write_text(&out.join("clustering.csv"), &rows_to_csv(&a.features, &a.clustering)?)?;
    write_json(&out.join("association.json"), &a.association)?;
    Ok(a.decision)
}

fn cmd_analyze(input: &Path, common: &CommonArgs, out: &Path) -> Result<i32> {
    let cfg = config_from(common)?;
    let ds = ingest_csv(input, cfg.fleet_size, cfg.bounds)?;
    write_analysis(&ds, &cfg, out)?;
    eprintln!("analysis written to {}", out.display());
    Ok(EXIT_OK)
}

fn cmd_decide(bundle: &Path, common: &CommonArgs, fallback: Option<Strategy>, out: Option<&Path>) -> Result<i32> {
    let cfg = config_from(common)?;
    let div = bundle.join("divergence.json");
    if !div.exists() {
        return Err(Error::Schema {
            path: div,
            message: "analysis bundle has no divergence.json".into(),
        });
    }
    let reports: Vec<DivergenceReport> = read_json(&div)?;
    let assoc_path = bundle.join("association.json");
    let assoc: Option<AssociationReport> = if assoc_path.exists() { Some(read_json(&assoc_path)?) } else { None };
    let decision = decide(&reports, assoc.as_ref(), &cfg.thresholds)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| bundle.join("decision.json"));
    write_json(&out, &decision)?;
    for line in &decision.rationale {
        eprintln!("{line}");
    }
    match decision.resolve(fallback.or(cfg.fallback)) {
        Ok(s) => {
            println!("{s}");
            Ok(EXIT_OK)
        }
        Err(e) => {
            println!("{}", Strategy::Indeterminate);
            eprintln!("error: {e}");
            Ok(EXIT_INDETERMINATE)
        }
    }
}

struct CampaignRun {
    oracle: String,
    out: PathBuf,
    resume: bool,
    stop_after: Option<u32>,
    timeout: Duration,
}

/// Exclusive lock on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".noiseopt.lock");
        std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::Schema {
                path: path.clone(),
                message: format!("output directory is locked by another run ({e})"),
            })?;
        Ok(Self(path))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn fleet_from(spec: &str, seed: u64) -> Result<FleetSimConfig> {
    match spec {
        "heterogeneous" | "homogeneous" => FleetSimConfig::preset(spec, seed),
        path => FleetSimConfig::load(path),
    }
}

fn oracle_from(spec: &str, seed: u64, timeout: Duration) -> Result<Box<dyn MeasurementOracle>> {
    if let Some(rest) = spec.strip_prefix("sim:") {
        Ok(Box::new(SimulatorOracle::new(fleet_from(rest, seed)?)?))
    } else if let Some(rest) = spec.strip_prefix("watch:") {
        Ok(Box::new(WatchFileOracle::new(rest, timeout)))
    } else {
        Err(Error::domain(format!("unknown oracle '{spec}' (expected sim:<preset|file> or watch:<csv>)")))
    }
}

fn save_outputs(state: &CampaignState, out: &Path) -> Result<()> {
    state.save(out.join("state.json"))?;
    state.dataset.save_csv(out.join("dataset.csv"))?;
    let log = out.join("iterations.csv");
    let file = std::fs::File::create(&log).map_err(|e| Error::io(&log, e))?;
    state.write_iteration_log(std::io::BufWriter::new(file))?;
    if let Some(a) = &state.analysis {
        let dir = out.join("analysis");
        create_dir(&dir)?;
        write_json(&dir.join("analysis.json"), a)?;
        write_text(&dir.join("divergence.csv"), &reports_to_csv(&a.reports)?)?;
        write_json(&dir.join("decision.json"), &a.decision)?;
    }
    Ok(())
}

fn cmd_campaign(cfg: CampaignConfig, run: &CampaignRun) -> Result<i32> {
    create_dir(&run.out)?;
    let _lock = DirLock::acquire(&run.out)?;
    let checkpoint = run.out.join("state.json");
    let mut state = if run.resume && checkpoint.exists() {
        let s = CampaignState::load(&checkpoint)?;
        if s.config != cfg {
            log::warn!("resuming with the checkpoint's configuration; command-line settings ignored");
        }
        s
    } else {
        if checkpoint.exists() && !run.resume {
            return Err(Error::Schema {
                path: checkpoint,
                message: "a checkpoint already exists; pass --resume or use another directory".into(),
            });
        }
        CampaignState::new(cfg)?
    };
    let seed = state.config.seed;
    let mut oracle = oracle_from(&run.oracle, seed, run.timeout)?;

    let result = (|| -> Result<bool> {
        state.prepare(oracle.as_mut())?;
        save_outputs(&state, &run.out)?;
        while !state.is_complete() {
            if run.stop_after.is_some_and(|k| state.iteration() >= k) {
                return Ok(false);
            }
            state.run_iteration(oracle.as_mut())?;
            save_outputs(&state, &run.out)?;
            log::info!("iteration {} complete", state.iteration());
        }
        Ok(true)
    })();

    match result {
        Ok(complete) => {
            save_outputs(&state, &run.out)?;
            write_report(&state, run.out.join("report"))?;
            if let Some(s) = state.strategy {
                println!("{s}");
            }
            if !complete {
                eprintln!("stopped after iteration {}; resume with --resume", state.iteration());
            }
            Ok(EXIT_OK)
        }
        Err(e) => {
            // Keep whatever completed so the campaign can resume.
            if let Err(save_err) = save_outputs(&state, &run.out) {
                eprintln!("warning: checkpoint failed: {save_err}");
            }
            Err(e)
        }
    }
}

fn cmd_simulate(preset: &str, common: &CommonArgs, out: &Path, fleet_out: Option<&Path>) -> Result<i32> {
    let mut cfg = config_from(common)?;
    let fleet = fleet_from(preset, cfg.seed)?;
    cfg.fleet_size = fleet.len();
    if let Some(p) = fleet_out {
        fleet.save(p)?;
    }
    let mut state = CampaignState::new(cfg)?;
    let mut oracle = SimulatorOracle::new(fleet)?;
    state.run_initial_design(&mut oracle)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    state.dataset.save_csv(out)?;
    eprintln!("wrote {} records to {}", state.dataset.len(), out.display());
    Ok(EXIT_OK)
}
