//! Command-line front end: `run` one scenario, `batch` a protocol × model ×
//! seed cross product, `report` on finished run directories.

pub mod batch;
pub mod report;
pub mod run;

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use vanetbench::metrics::MetricsReport;
use vanetbench::scenario::Scenario;

pub use run::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "vanetbench", version, about = "Deterministic VANET routing benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one scenario and write its trace and metrics.
    Run(run::RunArgs),
    /// Run every protocol × mobility × seed combination and tabulate them.
    Batch(batch::BatchArgs),
    /// Plot data and a metrics table for finished run directories.
    Report(report::ReportArgs),
}

/// Scenario selection and output placement shared by `run` and `batch`.
#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// Scenario file. Without one the built-in 1 km urban grid is used.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Override a scenario key, e.g. `--set traffic.rate=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Parent directory for run outputs.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Replace existing run directories.
    #[arg(long)]
    pub force: bool,
}

impl ScenarioArgs {
    pub fn load(&self) -> anyhow::Result<Scenario> {
        let s = match &self.scenario {
            Some(path) => Scenario::load(path, &self.overrides),
            None => Scenario::parse("", &self.overrides),
        };
        let s = s.with_context(|| format!("invalid scenario {}", self.scenario_name()))?;
        s.validate().with_context(|| format!("invalid scenario {}", self.scenario_name()))?;
        Ok(s)
    }

    pub fn scenario_name(&self) -> String {
        self.scenario
            .as_deref()
            .and_then(Path::file_stem)
            .map_or_else(|| "default".to_string(), |s| s.to_string_lossy().into_owned())
    }
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(args) => run::cmd_run(&args),
        Command::Batch(args) => batch::cmd_batch(&args),
        Command::Report(args) => report::cmd_report(&args),
    }
}

/// Metrics tabulated by `batch` and `report`, in column order.
pub const TABLE_METRICS: [&str; 11] = [
    "sent",
    "received",
    "dropped",
    "throughput_sent_bytes",
    "throughput_recv_bytes",
    "pdr",
    "drop_pct",
    "avg_throughput_kbps",
    "nrl",
    "route_cost",
    "mean_hop",
];

pub fn table_values(m: &MetricsReport) -> Vec<Option<f64>> {
    let all = m.scalars();
    TABLE_METRICS
        .iter()
        .map(|name| all.iter().find(|(n, _)| n == name).and_then(|(_, v)| *v))
        .collect()
}

/// Table cell text; undefined metrics are empty.
pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

/// Like [`fmt_metric`], but whole counts print without decimals.
pub fn fmt_cell(metric: &str, v: Option<f64>) -> String {
    let count = matches!(metric, "sent" | "received" | "dropped" | "throughput_sent_bytes" | "throughput_recv_bytes");
    match v {
        Some(x) if count && x.fract() == 0.0 => format!("{x:.0}"),
        _ => fmt_metric(v),
    }
}
