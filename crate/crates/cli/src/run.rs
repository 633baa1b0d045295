use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::Args;
use serde::Serialize;
use vanetbench::metrics::{analyze, MetricsReport};
use vanetbench::mobility::{write_mobility_trace, MobilityModel, MobilityStats};
use vanetbench::network::NetworkStats;
use vanetbench::routing::Protocol;
use vanetbench::scenario::Scenario;
use vanetbench::trace::{write_trace, PacketKind, TraceRecord};

use crate::ScenarioArgs;

pub const TRACE_FILE: &str = "trace.tr";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DELAY_FILE: &str = "delay.csv";
pub const JITTER_FILE: &str = "jitter.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const MOBILITY_FILE: &str = "mobility.tr";

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `routing.protocol`: aodv, aomdv, dsdv or olsr.
    #[arg(long)]
    pub protocol: Option<Protocol>,
    /// Overrides `mobility.model`: idm-im or idm-lc.
    #[arg(long)]
    pub mobility: Option<MobilityModel>,
    /// Also write vehicle positions once per simulated second.
    #[arg(long)]
    pub mobility_trace: bool,
}

/// One fully resolved run: the scenario with seed, protocol and model applied.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub scenario_path: Option<PathBuf>,
    pub scenario_name: String,
    pub seed: u64,
    pub protocol: Protocol,
    pub model: MobilityModel,
    pub overrides: Vec<String>,
    pub out_dir: PathBuf,
}

impl RunManifest {
    pub fn new(args: &ScenarioArgs, scenario: &Scenario) -> Self {
        let mut m = RunManifest {
            scenario_path: args.scenario.clone(),
            scenario_name: args.scenario_name(),
            seed: scenario.run.seed,
            protocol: scenario.routing.protocol,
            model: scenario.mobility.model,
            overrides: args.overrides.clone(),
            out_dir: PathBuf::new(),
        };
        m.out_dir = args.out.join(m.dir_name());
        m
    }

    /// Unique per (scenario, seed, protocol, model).
    pub fn dir_name(&self) -> String {
        format!("{}-{}-{}-seed{}", self.scenario_name, self.protocol, self.model, self.seed)
    }

    pub fn apply(&self, s: &Scenario) -> Scenario {
        s.clone().with_seed(self.seed).with_protocol(self.protocol).with_model(self.model)
    }
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    /// `valid`, or `invalid` when the run faulted or its trace failed analysis.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub scenario: String,
    pub protocol: Protocol,
    pub mobility: MobilityModel,
    pub seed: u64,
    pub duration: f64,
    pub overrides: Vec<String>,
    pub wall_seconds: f64,
    pub trace_records: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vehicles: Option<MobilityStats>,
}

/// Labels read back from a run directory.
#[derive(Debug, Clone, serde::Deserialize)]
pub struct SummaryLabels {
    pub status: String,
    pub protocol: Protocol,
    pub mobility: MobilityModel,
    pub seed: u64,
    pub duration: f64,
}

pub fn read_labels(dir: &Path) -> anyhow::Result<SummaryLabels> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("corrupt {}", path.display()))
}

pub fn cmd_run(args: &RunArgs) -> anyhow::Result<()> {
    let mut scenario = args.scenario.load()?;
    if let Some(seed) = args.seed {
        scenario = scenario.with_seed(seed);
    }
    if let Some(p) = args.protocol {
        scenario = scenario.with_protocol(p);
    }
    if let Some(m) = args.mobility {
        scenario = scenario.with_model(m);
    }
    let manifest = RunManifest::new(&args.scenario, &scenario);
    let report = execute_run(&manifest, &scenario, args.scenario.force, args.mobility_trace)?;
    println!(
        "{}: {} CBR sent, {} received, PDR {}%",
        manifest.out_dir.display(),
        report.sent,
        report.received,
        crate::fmt_metric(report.pdr)
    );
    Ok(())
}

pub fn prepare_dir(dir: &Path, force: bool) -> anyhow::Result<()> {
    if dir.exists() {
        if !force {
            bail!("{} already exists; pass --force to overwrite it", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("cannot clear {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown fault".into())
}

/// Runs `manifest` against `base` and writes every output file into
/// `manifest.out_dir`. A fault mid-run still writes the partial trace, with
/// the summary marked invalid.
pub fn execute_run(manifest: &RunManifest, base: &Scenario, force: bool, mobility_trace: bool) -> anyhow::Result<MetricsReport> {
    let scenario = manifest.apply(base);
    let dir = &manifest.out_dir;
    let mut net = scenario.build().with_context(|| format!("cannot build scenario {}", manifest.scenario_name))?;
    prepare_dir(dir, force)?;
    fs::write(dir.join(CONFIG_FILE), scenario.effective_toml())?;

    let started = Instant::now();
    let duration = scenario.run.duration;
    let fault = catch_unwind(AssertUnwindSafe(|| net.run_until(duration))).err().map(panic_message);
    let wall_seconds = started.elapsed().as_secs_f64();
    let mut summary = RunSummary {
        status: "valid".into(),
        error: None,
        scenario: manifest.scenario_path.as_ref().map_or_else(|| "built-in".into(), |p| p.display().to_string()),
        protocol: manifest.protocol,
        mobility: manifest.model,
        seed: manifest.seed,
        duration,
        overrides: manifest.overrides.clone(),
        wall_seconds,
        trace_records: 0,
        network: None,
        vehicles: None,
    };

    let trace: Vec<TraceRecord> = match fault {
        Some(msg) => {
            let partial = net.trace().to_vec();
            summary.status = "invalid".into();
            summary.error = Some(format!("run faulted at t = {:.6} s: {msg}", net.now()));
            summary.trace_records = partial.len();
            write_trace_file(dir, &partial)?;
            write_summary(dir, &summary)?;
            bail!("{}: {}", dir.display(), summary.error.unwrap());
        }
        None => {
            let out = net.finish();
            summary.network = Some(out.stats);
            summary.vehicles = out.mobility;
            out.trace
        }
    };
    summary.trace_records = trace.len();
    write_trace_file(dir, &trace)?;

    let report = match analyze(&trace, PacketKind::Cbr) {
        Ok(r) => r,
        Err(e) => {
            summary.status = "invalid".into();
            summary.error = Some(format!("trace analysis failed: {e}"));
            write_summary(dir, &summary)?;
            bail!("{}: trace analysis failed: {e}", dir.display());
        }
    };
    write_metrics(&dir.join(METRICS_FILE), manifest, &report, duration)?;
    write_series(&dir.join(DELAY_FILE), "delay", &report.delay)?;
    write_series(&dir.join(JITTER_FILE), "jitter", &report.jitter)?;
    if mobility_trace {
        let mut world = scenario.build_world()?;
        let out = BufWriter::new(File::create(dir.join(MOBILITY_FILE))?);
        write_mobility_trace(&mut world, duration, out)?;
    }
    write_summary(dir, &summary)?;
    Ok(report)
}

fn write_trace_file(dir: &Path, trace: &[TraceRecord]) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(dir.join(TRACE_FILE))?);
    write_trace(&mut out, trace)?;
    out.flush()?;
    Ok(())
}

fn write_summary(dir: &Path, summary: &RunSummary) -> anyhow::Result<()> {
    fs::write(dir.join(SUMMARY_FILE), toml::to_string(summary)?)?;
    Ok(())
}

/// One row per metric: `protocol,mobility,metric,value`, value empty when undefined.
pub fn write_metrics(path: &Path, manifest: &RunManifest, m: &MetricsReport, duration: f64) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["protocol", "mobility", "metric", "value"])?;
    let (p, model) = (manifest.protocol.to_string(), manifest.model.to_string());
    let mut rows: Vec<(String, Option<f64>)> = m.scalars().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    rows.push(("avg_throughput_nominal_kbps".into(), m.avg_throughput_nominal(duration).ok()));
    rows.extend(m.dropped_by_reason.iter().map(|(r, n)| (format!("dropped_{}", r.as_str()), Some(*n as f64))));
    for (name, v) in rows {
        w.write_record([p.as_str(), model.as_str(), name.as_str(), v.map(|v| v.to_string()).unwrap_or_default().as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column `time,<value>` CSV.
pub fn write_series(path: &Path, value: &str, series: &[(f64, f64)]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time", value])?;
    for (t, v) in series {
        w.write_record([t.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
