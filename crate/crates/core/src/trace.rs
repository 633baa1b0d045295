//! Packet trace: one record per line,
//! `time event reason layer kind packet_id flow_id node size`.
//!
//! Times are stored quantized to whole nanoseconds so that a trace read back
//! from disk is identical to the in-memory one.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use thiserror::Error;

pub const TRACE_HEADER: &str = "# vanetbench-trace v1: time event reason layer kind packet_id flow_id node size";

macro_rules! token_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ();
            fn from_str(s: &str) -> Result<Self, ()> {
                match s { $($text => Ok($name::$variant),)+ _ => Err(()) }
            }
        }
    };
}

token_enum!(TraceEvent {
    Sent => "s",
    Received => "r",
    Forwarded => "f",
    Dropped => "d",
});

token_enum!(
    /// `EndOfRun` marks packets still queued or in flight when the run stops.
    DropReason {
        None => "-",
        Ifq => "ifq",
        NoRoute => "no-route",
        Ttl => "ttl",
        Fading => "fading",
        Collision => "collision",
        EndOfRun => "end-of-run",
    }
);

token_enum!(Layer {
    App => "app",
    Routing => "routing",
    Mac => "mac",
});

token_enum!(PacketKind {
    Cbr => "cbr",
    Pbc => "pbc",
    Control => "routing-control",
    Ack => "ack",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceRecord {
    /// Nanoseconds since the start of the run.
    pub time_ns: u64,
    pub event: TraceEvent,
    pub reason: DropReason,
    pub layer: Layer,
    pub kind: PacketKind,
    pub packet_id: u64,
    pub flow_id: Option<u32>,
    pub node: u32,
    pub size: u32,
}

impl TraceRecord {
    pub fn time(&self) -> f64 {
        self.time_ns as f64 * 1e-9
    }
}

pub fn quantize(t: f64) -> u64 {
    (t * 1e9).round() as u64
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{:09} {} {} {} {} {} ",
            self.time_ns / 1_000_000_000,
            self.time_ns % 1_000_000_000,
            self.event,
            self.reason,
            self.layer,
            self.kind,
            self.packet_id
        )?;
        match self.flow_id {
            Some(flow) => write!(f, "{flow}")?,
            None => f.write_str("-")?,
        }
        write!(f, " {} {}", self.node, self.size)
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn parse_time(s: &str) -> Option<u64> {
    let (secs, frac) = s.split_once('.')?;
    if frac.len() != 9 {
        return None;
    }
    Some(secs.parse::<u64>().ok()? * 1_000_000_000 + frac.parse::<u64>().ok()?)
}

impl FromStr for TraceRecord {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, String> {
        let cols: Vec<&str> = line.split_ascii_whitespace().collect();
        if cols.len() != 9 {
            return Err(format!("expected 9 columns, found {}", cols.len()));
        }
        let bad = |what: &str, v: &str| format!("bad {what} `{v}`");
        Ok(TraceRecord {
            time_ns: parse_time(cols[0]).ok_or_else(|| bad("time", cols[0]))?,
            event: cols[1].parse().map_err(|_| bad("event", cols[1]))?,
            reason: cols[2].parse().map_err(|_| bad("reason", cols[2]))?,
            layer: cols[3].parse().map_err(|_| bad("layer", cols[3]))?,
            kind: cols[4].parse().map_err(|_| bad("kind", cols[4]))?,
            packet_id: cols[5].parse().map_err(|_| bad("packet id", cols[5]))?,
            flow_id: match cols[6] {
                "-" => None,
                v => Some(v.parse().map_err(|_| bad("flow id", v))?),
            },
            node: cols[7].parse().map_err(|_| bad("node", cols[7]))?,
            size: cols[8].parse().map_err(|_| bad("size", cols[8]))?,
        })
    }
}

pub fn write_trace<W: Write>(mut out: W, records: &[TraceRecord]) -> io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in records {
        writeln!(out, "{r}")?;
    }
    out.flush()
}

/// Reads a trace, skipping `#` comment lines.
pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        records.push(trimmed.parse().map_err(|msg| TraceError::Parse { line: i + 1, msg })?);
    }
    Ok(records)
}
