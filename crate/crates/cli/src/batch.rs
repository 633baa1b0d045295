use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use clap::Args;
use rayon::prelude::*;
use vanetbench::mobility::MobilityModel;
use vanetbench::routing::Protocol;

use crate::run::{execute_run, RunManifest};
use crate::{fmt_cell, fmt_metric, table_values, ScenarioArgs, TABLE_METRICS};

pub const BATCH_FILE: &str = "batch.csv";

/// Table values of one run, in `TABLE_METRICS` order.
type RunValues = Vec<Option<f64>>;

/// One batch row: values per seed, in seed order.
pub type BatchRow = (Protocol, MobilityModel, Vec<RunValues>);

#[derive(Debug, Args)]
pub struct BatchArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Comma-separated protocols.
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values = ["aodv", "aomdv", "dsdv", "olsr"])]
    pub protocols: Vec<Protocol>,
    /// Comma-separated mobility models.
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values = ["idm-im", "idm-lc"])]
    pub mobilities: Vec<MobilityModel>,
    /// Comma-separated seeds or inclusive ranges, e.g. `1,4-6`.
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values = ["1"], value_parser = parse_seeds)]
    pub seeds: Vec<SeedSpec>,
    /// Parallel runs; defaults to the number of CPUs.
    #[arg(long, env = "VANETBENCH_JOBS")]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSpec {
    pub first: u64,
    pub last: u64,
}

fn parse_seeds(s: &str) -> Result<SeedSpec, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad seed `{t}`: {e}"));
    let (first, last) = match s.split_once('-') {
        Some((a, b)) => (num(a)?, num(b)?),
        None => (num(s)?, num(s)?),
    };
    if first > last {
        return Err(format!("empty seed range `{s}`"));
    }
    Ok(SeedSpec { first, last })
}

pub fn expand_seeds(specs: &[SeedSpec]) -> Vec<u64> {
    let mut seeds = Vec::new();
    for s in specs {
        for seed in s.first..=s.last {
            if !seeds.contains(&seed) {
                seeds.push(seed);
            }
        }
    }
    seeds
}

pub fn cmd_batch(args: &BatchArgs) -> anyhow::Result<()> {
    let base = args.scenario.load()?;
    let seeds = expand_seeds(&args.seeds);
    if args.protocols.is_empty() || args.mobilities.is_empty() || seeds.is_empty() {
        bail!("--protocols, --mobilities and --seeds must be non-empty");
    }
    let mut jobs = Vec::new();
    for &protocol in &args.protocols {
        for &model in &args.mobilities {
            for &seed in &seeds {
                let s = base.clone().with_protocol(protocol).with_model(model).with_seed(seed);
                jobs.push(RunManifest::new(&args.scenario, &s));
            }
        }
    }
    let threads = args.jobs.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().context("cannot start worker pool")?;
    let results: Vec<_> = pool.install(|| {
        jobs.par_iter()
            .map(|m| {
                let r = execute_run(m, &base, args.scenario.force, false);
                match &r {
                    Ok(rep) => eprintln!("done {} (PDR {})", m.dir_name(), fmt_metric(rep.pdr)),
                    Err(e) => eprintln!("FAILED {}: {e:#}", m.dir_name()),
                }
                r.map(|rep| table_values(&rep))
            })
            .collect()
    });

    let mut rows: BTreeMap<(usize, usize), BTreeMap<u64, RunValues>> = BTreeMap::new();
    let mut failed = Vec::new();
    for (m, r) in jobs.iter().zip(results) {
        let key = (
            args.protocols.iter().position(|&p| p == m.protocol).unwrap(),
            args.mobilities.iter().position(|&x| x == m.model).unwrap(),
        );
        match r {
            Ok(values) => {
                rows.entry(key).or_default().insert(m.seed, values);
            }
            Err(e) => failed.push(format!("{}: {e:#}", m.dir_name())),
        }
    }
    // A row needs every seed.
    rows.retain(|_, per_seed| per_seed.len() == seeds.len());

    std::fs::create_dir_all(&args.scenario.out)?;
    let path = args.scenario.out.join(BATCH_FILE);
    let table: Vec<BatchRow> = rows
        .into_iter()
        .map(|((p, m), per_seed)| (args.protocols[p], args.mobilities[m], seeds.iter().map(|s| per_seed[s].clone()).collect()))
        .collect();
    write_batch_csv(&path, &seeds, &table)?;
    println!("{} rows written to {}", table.len(), path.display());
    if !failed.is_empty() {
        bail!("{} of {} runs failed:\n  {}", failed.len(), jobs.len(), failed.join("\n  "));
    }
    Ok(())
}

/// Mean over the seeds that define the metric.
fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Columns `protocol,mobility`, then per metric `{metric}_seed{S}`... and `{metric}_mean`.
pub fn write_batch_csv(path: &Path, seeds: &[u64], rows: &[BatchRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["protocol".to_string(), "mobility".to_string()];
    for metric in TABLE_METRICS {
        header.extend(seeds.iter().map(|s| format!("{metric}_seed{s}")));
        header.push(format!("{metric}_mean"));
    }
    w.write_record(&header)?;
    for (protocol, model, per_seed) in rows {
        let mut rec = vec![protocol.to_string(), model.to_string()];
        for (i, metric) in TABLE_METRICS.iter().enumerate() {
            rec.extend(per_seed.iter().map(|v| fmt_cell(metric, v[i])));
            rec.push(fmt_cell(metric, mean(per_seed.iter().map(|v| v[i]))));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
