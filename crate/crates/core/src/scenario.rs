//! Scenario files: a TOML document with `[graph]`, `[mobility]`, `[phy]`,
//! `[mac]`, `[routing]`, `[traffic]` and `[run]` sections. Every key is
//! optional; absent keys take the defaults below. Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::TrafficConfig;
use crate::mac::MacParams;
use crate::mobility::{IdmParams, MobilParams, MobilityConfig, MobilityError, MobilityModel, MobilityWorld};
use crate::network::{Network, NetworkConfig, NetworkError, Topology};
use crate::phy::PhyConfig;
use crate::road::{EdgeSpec, GridSpec, RoadError, RoadGraph, TrafficLight, DEFAULT_MAX_LANES, DEFAULT_PHASE_LENGTH, DEFAULT_SPEED_LIMIT};
use crate::routing::{Protocol, RoutingConfig};
use crate::sim::RngStream;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{}", schema_message(.key, .line, .message))]
    Schema { key: Option<String>, line: Option<usize>, message: String },
    #[error("invalid override `{0}`: expected key=value with a dotted key such as routing.protocol")]
    Override(String),
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
    #[error(transparent)]
    Road(#[from] RoadError),
    #[error(transparent)]
    Mobility(#[from] MobilityError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

fn schema_message(key: &Option<String>, line: &Option<usize>, message: &str) -> String {
    match (key, line) {
        (Some(k), Some(l)) => format!("line {l}: key `{k}`: {message}"),
        (Some(k), None) => format!("key `{k}`: {message}"),
        (None, Some(l)) => format!("line {l}: {message}"),
        (None, None) => message.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub rows: usize,
    pub cols: usize,
    /// Block edge length, m.
    pub spacing: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { rows: 5, cols: 5, spacing: 250.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeEntry {
    pub from: usize,
    pub to: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lanes: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_limit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightEntry {
    pub vertex: usize,
    /// Inbound edge indices granted green, one list per phase.
    pub phases: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_length: Option<f64>,
    #[serde(default)]
    pub offset: f64,
}

/// Either a Manhattan grid or an explicit vertex/edge list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub vertices: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<EdgeEntry>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub lights: Vec<LightEntry>,
    /// Lanes per direction on edges that do not set their own.
    pub lanes: u32,
    pub speed_limit: f64,
    pub phase_length: f64,
    pub max_lanes: u32,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            grid: None,
            vertices: Vec::new(),
            edges: Vec::new(),
            lights: Vec::new(),
            lanes: 2,
            speed_limit: DEFAULT_SPEED_LIMIT,
            phase_length: DEFAULT_PHASE_LENGTH,
            max_lanes: 2,
        }
    }
}

impl GraphSection {
    pub fn build(&self) -> Result<RoadGraph, ScenarioError> {
        if self.max_lanes == 0 || self.max_lanes > DEFAULT_MAX_LANES {
            return Err(invalid("graph.max_lanes", format!("must be in 1..={DEFAULT_MAX_LANES}, got {}", self.max_lanes)));
        }
        if self.vertices.is_empty() {
            let g = self.grid.clone().unwrap_or_default();
            let spec = GridSpec {
                rows: g.rows,
                cols: g.cols,
                spacing: g.spacing,
                lanes: self.lanes,
                speed_limit: self.speed_limit,
                phase_length: self.phase_length,
            };
            return Ok(spec.build(self.max_lanes)?);
        }
        if self.grid.is_some() {
            return Err(invalid("graph.grid", "cannot be combined with explicit vertices".into()));
        }
        let vertices = self.vertices.iter().map(|v| (v[0], v[1])).collect();
        let edges = self
            .edges
            .iter()
            .map(|e| EdgeSpec {
                from: e.from,
                to: e.to,
                lanes: e.lanes.unwrap_or(self.lanes),
                speed_limit: e.speed_limit.unwrap_or(self.speed_limit),
            })
            .collect();
        let lights = self
            .lights
            .iter()
            .map(|l| TrafficLight {
                vertex: l.vertex,
                phase_length: l.phase_length.unwrap_or(self.phase_length),
                phases: l.phases.clone(),
                offset: l.offset,
            })
            .collect();
        Ok(RoadGraph::new(vertices, edges, lights, self.max_lanes)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobilitySection {
    pub model: MobilityModel,
    pub vehicles: usize,
    pub a_max: f64,
    pub b: f64,
    pub s0: f64,
    pub headway: f64,
    pub length: f64,
    pub visibility: f64,
    pub recalc_step: f64,
    pub politeness: f64,
    pub accel_threshold: f64,
    pub safe_decel_limit: f64,
    pub min_speed_kmh: f64,
    pub max_speed_kmh: f64,
    pub min_stay: f64,
    pub max_stay: f64,
    pub dt: f64,
}

impl Default for MobilitySection {
    fn default() -> Self {
        let c = MobilityConfig::default();
        MobilitySection {
            model: c.model,
            vehicles: 100,
            a_max: c.idm.a_max,
            b: c.idm.b,
            s0: c.idm.s0,
            headway: c.idm.headway,
            length: c.idm.length,
            visibility: c.idm.visibility,
            recalc_step: c.idm.recalc_step,
            politeness: c.mobil.politeness,
            accel_threshold: c.mobil.accel_threshold,
            safe_decel_limit: c.mobil.safe_decel_limit,
            min_speed_kmh: (c.speed_range.0 * 3.6 * 1e9).round() / 1e9,
            max_speed_kmh: (c.speed_range.1 * 3.6 * 1e9).round() / 1e9,
            min_stay: c.pause_range.0,
            max_stay: c.pause_range.1,
            dt: c.dt,
        }
    }
}

impl MobilitySection {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let positive = [
            ("a_max", self.a_max),
            ("b", self.b),
            ("s0", self.s0),
            ("headway", self.headway),
            ("length", self.length),
            ("visibility", self.visibility),
            ("recalc_step", self.recalc_step),
            ("safe_decel_limit", self.safe_decel_limit),
            ("min_speed_kmh", self.min_speed_kmh),
            ("dt", self.dt),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(&format!("mobility.{k}"), format!("must be positive, got {v}")));
            }
        }
        if !(self.max_speed_kmh >= self.min_speed_kmh && self.max_speed_kmh.is_finite()) {
            return Err(invalid("mobility.max_speed_kmh", "must be at least min_speed_kmh".into()));
        }
        if !(self.min_stay >= 0.0 && self.max_stay >= self.min_stay && self.max_stay.is_finite()) {
            return Err(invalid("mobility.max_stay", "need 0 <= min_stay <= max_stay".into()));
        }
        if !(self.politeness >= 0.0 && self.accel_threshold >= 0.0) {
            return Err(invalid("mobility.politeness", "politeness and accel_threshold must be non-negative".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> MobilityConfig {
        MobilityConfig {
            model: self.model,
            idm: IdmParams {
                a_max: self.a_max,
                b: self.b,
                s0: self.s0,
                headway: self.headway,
                length: self.length,
                visibility: self.visibility,
                recalc_step: self.recalc_step,
            },
            mobil: MobilParams {
                politeness: self.politeness,
                accel_threshold: self.accel_threshold,
                safe_decel_limit: self.safe_decel_limit,
            },
            speed_range: (self.min_speed_kmh / 3.6, self.max_speed_kmh / 3.6),
            pause_range: (self.min_stay, self.max_stay),
            dt: self.dt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Simulated seconds.
    pub duration: f64,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { duration: 100.0, seed: 1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub graph: GraphSection,
    pub mobility: MobilitySection,
    pub phy: PhyConfig,
    pub mac: MacParams,
    pub routing: RoutingConfig,
    pub traffic: TrafficConfig,
    pub run: RunSection,
}

fn invalid(key: &str, message: String) -> ScenarioError {
    ScenarioError::Invalid { key: key.into(), message }
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Line of the first `key = ...` assignment, for errors that carry no span.
fn find_key_line(src: &str, key: &str) -> Option<usize> {
    src.lines().position(|l| {
        let t = l.trim_start();
        t.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

fn schema_error(src: &str, e: toml::de::Error) -> ScenarioError {
    let message = e.message().trim().to_string();
    let key = message
        .split('`')
        .nth(1)
        .filter(|_| message.starts_with("unknown field") || message.starts_with("missing field"))
        .map(str::to_string);
    // Flattened sections report the enclosing table's span instead of the key's.
    let line = match (e.span(), key.as_deref()) {
        (Some(s), Some(k)) if src.get(s.clone()).is_some_and(|t| t.contains(k)) => Some(line_of(src, s.start)),
        (_, Some(k)) => find_key_line(src, k),
        (Some(s), None) => Some(line_of(src, s.start)),
        (None, None) => None,
    };
    ScenarioError::Schema { key, line, message }
}

/// Splits `a.b.c=value` and parses the value as TOML, falling back to a bare string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value), ScenarioError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ScenarioError::Override(spec.into()))?;
    let path: Vec<String> = key.trim().split('.').map(|s| s.trim().to_string()).collect();
    if path.len() < 2 || path.iter().any(String::is_empty) {
        return Err(ScenarioError::Override(spec.into()));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(doc: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), ScenarioError> {
    let (last, parents) = path.split_last().expect("override paths have at least two parts");
    let mut table = doc;
    for p in parents {
        let entry = table.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| invalid(&path.join("."), format!("`{p}` is not a table")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl Scenario {
    /// Parses and validates scenario text, applying `key=value` overrides first.
    pub fn parse(src: &str, overrides: &[String]) -> Result<Self, ScenarioError> {
        let scenario: Scenario = if overrides.is_empty() {
            toml::from_str(src).map_err(|e| schema_error(src, e))?
        } else {
            let mut doc: toml::Table = toml::from_str(src).map_err(|e| schema_error(src, e))?;
            for spec in overrides {
                let (path, value) = parse_override(spec)?;
                apply_override(&mut doc, &path, value)?;
            }
            let merged = toml::to_string(&doc).expect("a parsed table serializes");
            toml::from_str(&merged).map_err(|e| {
                let ScenarioError::Schema { key, message, .. } = schema_error(&merged, e) else { unreachable!() };
                ScenarioError::Schema { key, line: None, message: format!("after overrides: {message}") }
            })?
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ScenarioError> {
        let src = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::parse(&src, overrides)
    }

    /// Checks everything short of building the road graph and the vehicles.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.mobility.validate()?;
        self.phy.nakagami.validate().map_err(NetworkError::from)?;
        self.mac.validate().map_err(NetworkError::from)?;
        if !(self.run.duration > 0.0 && self.run.duration.is_finite()) {
            return Err(invalid("run.duration", format!("must be positive, got {}", self.run.duration)));
        }
        let t = &self.traffic;
        if !(t.rate > 0.0 && t.rate.is_finite()) {
            return Err(invalid("traffic.rate", format!("must be positive, got {}", t.rate)));
        }
        if t.packet_size == 0 {
            return Err(invalid("traffic.packet_size", "must be positive".into()));
        }
        if !(t.beacon_interval > 0.0 && t.beacon_interval.is_finite()) {
            return Err(invalid("traffic.beacon_interval", format!("must be positive, got {}", t.beacon_interval)));
        }
        if t.emergency_decel.is_some_and(|d| !(d > 0.0)) {
            return Err(invalid("traffic.emergency_decel", "must be positive".into()));
        }
        if self.graph.lanes == 0 {
            return Err(invalid("graph.lanes", "must be at least 1".into()));
        }
        Ok(())
    }

    /// The configuration with every default filled in, as TOML.
    pub fn effective_toml(&self) -> String {
        let mut s = self.clone();
        if s.graph.vertices.is_empty() && s.graph.grid.is_none() {
            s.graph.grid = Some(GridSection::default());
        }
        toml::to_string(&s).expect("scenario serializes")
    }

    pub fn with_protocol(mut self, p: Protocol) -> Self {
        self.routing.protocol = p;
        self
    }

    pub fn with_model(mut self, m: MobilityModel) -> Self {
        self.mobility.model = m;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.run.seed = seed;
        self
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            phy: self.phy.clone(),
            mac: self.mac.clone(),
            routing: self.routing.clone(),
            traffic: self.traffic.clone(),
            duration: self.run.duration,
            seed: self.run.seed,
        }
    }

    pub fn build_world(&self) -> Result<MobilityWorld, ScenarioError> {
        let graph = self.graph.build()?;
        let rng = RngStream::new(self.run.seed, "mobility");
        Ok(MobilityWorld::spawn(graph, self.mobility.config(), self.mobility.vehicles, rng)?)
    }

    pub fn build(&self) -> Result<Network, ScenarioError> {
        let world = self.build_world()?;
        Ok(Network::new(self.network_config(), Topology::Road(Box::new(world)))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_takes_defaults() {
        let s = Scenario::parse("", &[]).unwrap();
        assert_eq!(s, Scenario::default());
        assert_eq!(s.mobility.vehicles, 100);
        assert_eq!(s.traffic.cbr_connections, 40);
        assert_eq!(s.run.duration, 100.0);
        assert_eq!(s.graph.max_lanes, 2);
        let g = s.graph.build().unwrap();
        assert_eq!(g.vertices().len(), 25);
        let far = g.vertices().iter().map(|v| v.x.max(v.y)).fold(0.0, f64::max);
        assert_eq!(far, 1000.0);
    }

    #[test]
    fn speed_band_defaults_are_round_kmh() {
        let m = MobilitySection::default();
        assert_eq!((m.min_speed_kmh, m.max_speed_kmh), (10.0, 80.0));
    }

    #[test]
    fn minimal_two_vertex_file() {
        let src = "[graph]\nvertices = [[0, 0], [100, 0]]\nedges = [{ from = 0, to = 1 }]\n";
        let s = Scenario::parse(src, &[]).unwrap();
        let g = s.graph.build().unwrap();
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.edge(0).lanes, 2);
        assert_eq!(g.edge(0).length, 100.0);
    }

    #[test]
    fn zero_lanes_is_rejected() {
        let src = "[graph]\nvertices = [[0, 0], [100, 0]]\nedges = [{ from = 0, to = 1, lanes = 0 }]\n";
        let s = Scenario::parse(src, &[]).unwrap();
        assert!(matches!(s.graph.build(), Err(ScenarioError::Road(RoadError::LaneCount { lanes: 0, .. }))));
    }

    #[test]
    fn lane_cap() {
        let s = Scenario::parse("[graph]\nmax_lanes = 11\n", &[]).unwrap();
        assert!(s.graph.build().is_err());
        let s = Scenario::parse("[graph]\nlanes = 3\n", &[]).unwrap();
        assert!(s.graph.build().is_err());
        let s = Scenario::parse("[graph]\nlanes = 3\nmax_lanes = 10\n", &[]).unwrap();
        assert!(s.graph.build().is_ok());
    }

    #[test]
    fn four_by_four_grid() {
        let s = Scenario::parse("[graph]\ngrid = { rows = 4, cols = 4, spacing = 250.0 }\n", &[]).unwrap();
        let g = s.graph.build().unwrap();
        assert_eq!((g.vertices().len(), g.edges().len(), g.lights().len()), (16, 48, 4));
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = Scenario::parse("[run]\nseed = 3\n\n[mac]\nslot = 1e-5\nbogus = 1\n", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("line 6"), "{msg}");
    }

    #[test]
    fn unknown_key_in_flattened_phy_section_still_has_line() {
        let err = Scenario::parse("[phy]\nm0 = 1.0\nwhatever = 2\n", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("whatever") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn wrong_type_reports_line() {
        let err = Scenario::parse("[traffic]\n\nrate = \"fast\"\n", &[]).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn unknown_protocol_lists_options() {
        let err = Scenario::parse("[routing]\nprotocol = \"zrp\"\n", &[]).unwrap_err().to_string();
        for p in ["aodv", "aomdv", "dsdv", "olsr"] {
            assert!(err.contains(p), "{err}");
        }
    }

    #[test]
    fn overrides_apply_and_validate() {
        let s = Scenario::parse("", &["routing.protocol=olsr".into(), "run.seed = 9".into(), "mobility.model=idm-lc".into()]).unwrap();
        assert_eq!(s.routing.protocol, Protocol::Olsr);
        assert_eq!(s.run.seed, 9);
        assert_eq!(s.mobility.model, MobilityModel::IdmLc);
        assert!(Scenario::parse("", &["run.duration=-1".into()]).is_err());
        assert!(Scenario::parse("", &["nodots=1".into()]).is_err());
        assert!(Scenario::parse("", &["run.nope=1".into()]).unwrap_err().to_string().contains("nope"));
    }

    #[test]
    fn effective_config_round_trips() {
        let s = Scenario::parse("[traffic]\ncbr_connections = 7\n[phy]\nfading = false\n", &[]).unwrap();
        let echoed = s.effective_toml();
        let back = Scenario::parse(&echoed, &[]).unwrap();
        assert_eq!(back.effective_toml(), echoed);
        assert_eq!(back.traffic.cbr_connections, 7);
        assert!(!back.phy.fading);
        assert!(back.graph.grid.is_some());
    }

    #[test]
    fn invalid_mobility_is_rejected() {
        assert!(Scenario::parse("[mobility]\ndt = 0\n", &[]).is_err());
        assert!(Scenario::parse("[mobility]\nmin_speed_kmh = 50\nmax_speed_kmh = 20\n", &[]).is_err());
    }

    #[test]
    fn small_scenario_builds_and_runs() {
        let src = "[mobility]\nvehicles = 10\n[traffic]\ncbr_connections = 3\n[run]\nduration = 3\n";
        let out = Scenario::parse(src, &[]).unwrap().build().unwrap().finish();
        assert!(!out.trace.is_empty());
        assert_eq!(out.flows.len(), 3);
    }
}
