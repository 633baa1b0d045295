//! Application traffic: constant-bit-rate flows carried by routing and the
//! periodic single-hop safety beacon.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::routing::NodeId;
use crate::sim::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficConfig {
    pub cbr_connections: u32,
    /// CBR payload, bytes.
    pub packet_size: u32,
    /// CBR packets per second.
    pub rate: f64,
    pub beacons: bool,
    pub beacon_interval: f64,
    pub beacon_size: u32,
    /// Deceleration (positive, m/s²) that triggers an emergency beacon; defaults to 3·b.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emergency_decel: Option<f64>,
    pub emergency_min_interval: f64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig {
            cbr_connections: 40,
            packet_size: 512,
            rate: 4.0,
            beacons: true,
            beacon_interval: 0.1,
            beacon_size: 200,
            emergency_decel: None,
            emergency_min_interval: 1.0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("{flows} CBR connections requested but {nodes} nodes only allow {pairs} ordered pairs")]
    TooManyFlows { flows: u32, nodes: u32, pairs: u64 },
    #[error("flow {flow}: {reason}")]
    InvalidFlow { flow: u32, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbrFlow {
    pub flow_id: u32,
    pub src: NodeId,
    pub dst: NodeId,
    pub packet_size: u32,
    pub rate: f64,
    pub start: f64,
    pub stop: f64,
}

impl CbrFlow {
    pub fn validate(&self) -> Result<(), AgentError> {
        let fail = |reason: &str| Err(AgentError::InvalidFlow { flow: self.flow_id, reason: reason.into() });
        if self.src == self.dst {
            return fail("source equals destination");
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return fail("rate must be positive");
        }
        if !(self.start >= 0.0 && self.stop >= self.start) {
            return fail("need 0 <= start <= stop");
        }
        Ok(())
    }

    /// Emission time of the `k`-th packet, or `None` once past `stop`.
    /// The packet at `start` is always emitted, even when `stop == start`.
    pub fn emission_time(&self, k: u64) -> Option<f64> {
        let t = self.start + k as f64 / self.rate;
        (k == 0 || t < self.stop).then_some(t)
    }

    pub fn emission_count(&self) -> u64 {
        (0..).take_while(|&k| self.emission_time(k).is_some()).count() as u64
    }
}

/// Draws `n_flows` distinct ordered `(src, dst)` pairs uniformly without
/// replacement over `nodes` nodes. Starts are jittered in `[0, 1/rate]`.
pub fn setup_flows(
    rng: &mut RngStream,
    n_flows: u32,
    nodes: u32,
    packet_size: u32,
    rate: f64,
    stop: f64,
) -> Result<Vec<CbrFlow>, AgentError> {
    let pairs = nodes as u64 * nodes.saturating_sub(1) as u64;
    if n_flows as u64 > pairs {
        return Err(AgentError::TooManyFlows { flows: n_flows, nodes, pairs });
    }
    if n_flows == 0 {
        return Ok(Vec::new());
    }
    let picks = sample(rng, pairs as usize, n_flows as usize);
    picks
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let src = (k as u64 / (nodes as u64 - 1)) as NodeId;
            let r = (k as u64 % (nodes as u64 - 1)) as NodeId;
            let dst = if r >= src { r + 1 } else { r };
            let start = rng.uniform(0.0, 1.0 / rate);
            let flow = CbrFlow { flow_id: i as u32, src, dst, packet_size, rate, start, stop: stop.max(start) };
            flow.validate()?;
            Ok(flow)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyBeacon {
    pub sender: NodeId,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    /// Radians, counter-clockwise from the +x axis.
    pub heading: f64,
    pub timestamp: f64,
    pub emergency: bool,
}

/// Per-vehicle gate for out-of-cycle emergency beacons.
#[derive(Debug, Clone, Default)]
pub struct EmergencyGate {
    last: Option<f64>,
}

impl EmergencyGate {
    /// True if a beacon may go out now; records the emission.
    pub fn try_fire(&mut self, accel: f64, threshold: f64, now: f64, min_interval: f64) -> bool {
        if accel > -threshold {
            return false;
        }
        if self.last.is_some_and(|t| now - t < min_interval - 1e-9) {
            return false;
        }
        self.last = Some(now);
        true
    }
}
