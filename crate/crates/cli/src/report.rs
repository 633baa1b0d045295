use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use vanetbench::metrics::analyze;
use vanetbench::trace::{read_trace, PacketKind};

use crate::run::{read_labels, write_series, SummaryLabels, TRACE_FILE};
use crate::{fmt_cell, fmt_metric, table_values, TABLE_METRICS};

pub const DELAY_PLOT_FILE: &str = "delay_plot.csv";
pub const JITTER_PLOT_FILE: &str = "jitter_plot.csv";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories written by `run` or `batch`.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    /// Directory for `report.csv`. Plot CSVs go into each run directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Add average throughput over the nominal run duration.
    #[arg(long)]
    pub nominal_throughput: bool,
}

pub struct ReportRow {
    pub labels: SummaryLabels,
    pub values: Vec<Option<f64>>,
    pub nominal_throughput: Option<f64>,
}

/// Reads one run directory and writes its plot CSVs next to the trace.
pub fn report_dir(dir: &Path) -> anyhow::Result<ReportRow> {
    let labels = read_labels(dir)?;
    if labels.status != "valid" {
        bail!("run is marked {}", labels.status);
    }
    let path = dir.join(TRACE_FILE);
    let file = File::open(&path).with_context(|| format!("missing {}", path.display()))?;
    let trace = read_trace(BufReader::new(file)).with_context(|| format!("corrupt {}", path.display()))?;
    let m = analyze(&trace, PacketKind::Cbr).with_context(|| format!("inconsistent {}", path.display()))?;
    write_series(&dir.join(DELAY_PLOT_FILE), "delay", &m.delay)?;
    write_series(&dir.join(JITTER_PLOT_FILE), "jitter", &m.jitter)?;
    Ok(ReportRow { values: table_values(&m), nominal_throughput: m.avg_throughput_nominal(labels.duration).ok(), labels })
}

pub fn render_table(rows: &[ReportRow], nominal: bool) -> String {
    let mut header: Vec<String> = ["protocol", "mobility", "seed"].map(String::from).to_vec();
    header.extend(TABLE_METRICS.iter().map(|m| m.to_string()));
    if nominal {
        header.push("avg_throughput_nominal_kbps".into());
    }
    let mut cells = vec![header];
    for r in rows {
        let mut line = vec![r.labels.protocol.to_string(), r.labels.mobility.to_string(), r.labels.seed.to_string()];
        line.extend(r.values.iter().zip(TABLE_METRICS).map(|(v, m)| fmt_cell(m, *v)));
        if nominal {
            line.push(fmt_metric(r.nominal_throughput));
        }
        cells.push(line);
    }
    let widths: Vec<usize> = (0..cells[0].len()).map(|c| cells.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for line in &cells {
        let padded: Vec<String> = line.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for dir in &args.dirs {
        match report_dir(dir) {
            Ok(r) => rows.push(r),
            Err(e) => failed.push(format!("{}: {e:#}", dir.display())),
        }
    }
    print!("{}", render_table(&rows, args.nominal_throughput));

    std::fs::create_dir_all(&args.out)?;
    let mut w = csv::Writer::from_path(args.out.join(REPORT_FILE))?;
    let mut header: Vec<&str> = vec!["protocol", "mobility", "seed"];
    header.extend(TABLE_METRICS);
    if args.nominal_throughput {
        header.push("avg_throughput_nominal_kbps");
    }
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![r.labels.protocol.to_string(), r.labels.mobility.to_string(), r.labels.seed.to_string()];
        rec.extend(r.values.iter().zip(TABLE_METRICS).map(|(v, m)| fmt_cell(m, *v)));
        if args.nominal_throughput {
            rec.push(fmt_metric(r.nominal_throughput));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    if !failed.is_empty() {
        bail!("{} of {} run directories failed:\n  {}", failed.len(), args.dirs.len(), failed.join("\n  "));
    }
    Ok(())
}
