//! Road topology: vertices, multi-lane directed edges, fixed-cycle traffic
//! lights and shortest-path trip planning.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use thiserror::Error;

use crate::sim::RngStream;

pub type VertexId = usize;
pub type EdgeId = usize;

/// 80 km/h, the top of the vehicle speed band.
pub const DEFAULT_SPEED_LIMIT: f64 = 80.0 / 3.6;
pub const DEFAULT_PHASE_LENGTH: f64 = 10.0;
pub const DEFAULT_MAX_LANES: u32 = 10;

#[derive(Debug, Error, PartialEq)]
pub enum RoadError {
    #[error("edge {edge}: lane_count {lanes} outside 1..={max}")]
    LaneCount { edge: EdgeId, lanes: u32, max: u32 },
    #[error("edge {edge}: unknown vertex {vertex}")]
    UnknownVertex { edge: EdgeId, vertex: VertexId },
    #[error("edge {edge}: endpoints coincide, length would be zero")]
    ZeroLength { edge: EdgeId },
    #[error("edge {edge}: speed limit must be positive")]
    SpeedLimit { edge: EdgeId },
    #[error("graph is disconnected; unreachable vertices: {unreachable:?}")]
    Disconnected { unreachable: Vec<VertexId> },
    #[error("traffic light at vertex {vertex}: {reason}")]
    Light { vertex: VertexId, reason: String },
    #[error("no route from vertex {from} to vertex {to}")]
    Unreachable { from: VertexId, to: VertexId },
    #[error("grid needs rows, cols >= 2 and spacing > 0 (got {rows}x{cols}, {spacing} m)")]
    GridShape { rows: usize, cols: usize, spacing: f64 },
    #[error("graph needs at least two vertices")]
    TooSmall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub id: VertexId,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: EdgeId,
    pub from: VertexId,
    pub to: VertexId,
    pub lanes: u32,
    pub length: f64,
    pub speed_limit: f64,
}

/// Input description of an edge; the length is derived from the vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSpec {
    pub from: VertexId,
    pub to: VertexId,
    pub lanes: u32,
    pub speed_limit: f64,
}

/// Fixed-cycle light without a yellow phase.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficLight {
    pub vertex: VertexId,
    pub phase_length: f64,
    /// Inbound edges granted green in each phase.
    pub phases: Vec<Vec<EdgeId>>,
    pub offset: f64,
}

impl TrafficLight {
    pub fn cycle(&self) -> f64 {
        self.phase_length * self.phases.len() as f64
    }

    pub fn active_phase(&self, t: f64) -> usize {
        let k = ((t + self.offset) / self.phase_length).floor();
        (k.rem_euclid(self.phases.len() as f64)) as usize
    }

    pub fn is_green(&self, edge: EdgeId, t: f64) -> bool {
        self.phases[self.active_phase(t)].contains(&edge)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    vertices: Vec<Vertex>,
    edges: Vec<Edge>,
    lights: Vec<TrafficLight>,
    out_edges: Vec<Vec<EdgeId>>,
    in_edges: Vec<Vec<EdgeId>>,
    light_at: Vec<Option<usize>>,
}

impl RoadGraph {
    /// Validates and builds a graph. Vertex ids are their positions in `vertices`.
    pub fn new(
        vertices: Vec<(f64, f64)>,
        edges: Vec<EdgeSpec>,
        lights: Vec<TrafficLight>,
        max_lanes: u32,
    ) -> Result<Self, RoadError> {
        if vertices.len() < 2 {
            return Err(RoadError::TooSmall);
        }
        let vertices: Vec<Vertex> = vertices
            .into_iter()
            .enumerate()
            .map(|(id, (x, y))| Vertex { id, x, y })
            .collect();
        let n = vertices.len();
        let mut built = Vec::with_capacity(edges.len());
        for (id, spec) in edges.into_iter().enumerate() {
            for v in [spec.from, spec.to] {
                if v >= n {
                    return Err(RoadError::UnknownVertex { edge: id, vertex: v });
                }
            }
            if spec.lanes == 0 || spec.lanes > max_lanes {
                return Err(RoadError::LaneCount { edge: id, lanes: spec.lanes, max: max_lanes });
            }
            if !(spec.speed_limit > 0.0) {
                return Err(RoadError::SpeedLimit { edge: id });
            }
            let (a, b) = (&vertices[spec.from], &vertices[spec.to]);
            let length = (b.x - a.x).hypot(b.y - a.y);
            if length <= 0.0 {
                return Err(RoadError::ZeroLength { edge: id });
            }
            built.push(Edge {
                id,
                from: spec.from,
                to: spec.to,
                lanes: spec.lanes,
                length,
                speed_limit: spec.speed_limit,
            });
        }
        let mut out_edges = vec![Vec::new(); n];
        let mut in_edges = vec![Vec::new(); n];
        for e in &built {
            out_edges[e.from].push(e.id);
            in_edges[e.to].push(e.id);
        }
        let mut light_at = vec![None; n];
        for (i, light) in lights.iter().enumerate() {
            let fail = |reason: String| RoadError::Light { vertex: light.vertex, reason };
            if light.vertex >= n {
                return Err(fail("unknown vertex".into()));
            }
            if light_at[light.vertex].is_some() {
                return Err(fail("more than one light".into()));
            }
            if !(light.phase_length > 0.0) {
                return Err(fail("phase_length must be positive".into()));
            }
            if light.phases.is_empty() {
                return Err(fail("no phases".into()));
            }
            let mut listed: Vec<EdgeId> = light.phases.iter().flatten().copied().collect();
            listed.sort_unstable();
            let mut inbound = in_edges[light.vertex].clone();
            inbound.sort_unstable();
            if listed != inbound {
                return Err(fail(format!(
                    "phases {:?} do not partition the inbound edges {:?}",
                    light.phases, inbound
                )));
            }
            light_at[light.vertex] = Some(i);
        }
        let graph = RoadGraph {
            vertices,
            edges: built,
            lights,
            out_edges,
            in_edges,
            light_at,
        };
        let unreachable = graph.unreachable_vertices();
        if !unreachable.is_empty() {
            return Err(RoadError::Disconnected { unreachable });
        }
        Ok(graph)
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, id: EdgeId) -> &Edge {
        &self.edges[id]
    }

    pub fn lights(&self) -> &[TrafficLight] {
        &self.lights
    }

    pub fn out_edges(&self, v: VertexId) -> &[EdgeId] {
        &self.out_edges[v]
    }

    pub fn in_edges(&self, v: VertexId) -> &[EdgeId] {
        &self.in_edges[v]
    }

    pub fn light_at(&self, v: VertexId) -> Option<&TrafficLight> {
        self.light_at[v].map(|i| &self.lights[i])
    }

    /// True when the light at the end of `edge` shows red for it at time `t`.
    /// Vertices without a light never show red.
    pub fn is_red(&self, edge: EdgeId, t: f64) -> bool {
        self.light_at(self.edges[edge].to)
            .is_some_and(|light| !light.is_green(edge, t))
    }

    /// Point at `offset` metres along `edge`.
    pub fn position(&self, edge: EdgeId, offset: f64) -> (f64, f64) {
        let e = &self.edges[edge];
        let (a, b) = (&self.vertices[e.from], &self.vertices[e.to]);
        let f = (offset / e.length).clamp(0.0, 1.0);
        (a.x + (b.x - a.x) * f, a.y + (b.y - a.y) * f)
    }

    /// Vertices not connected to vertex 0 when edge direction is ignored.
    pub fn unreachable_vertices(&self) -> Vec<VertexId> {
        let n = self.vertices.len();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            let nbrs = self.out_edges[v]
                .iter()
                .map(|&e| self.edges[e].to)
                .chain(self.in_edges[v].iter().map(|&e| self.edges[e].from));
            for u in nbrs {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        (0..n).filter(|&v| !seen[v]).collect()
    }

    /// Minimum-length path by Dijkstra over edge lengths. Ties resolve toward
    /// lower vertex ids, so the result is deterministic.
    pub fn shortest_path(&self, from: VertexId, to: VertexId) -> Option<(Vec<EdgeId>, f64)> {
        #[derive(PartialEq)]
        struct Item(f64, VertexId);
        impl Eq for Item {}
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> Ordering {
                o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1))
            }
        }
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }

        let n = self.vertices.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut via: Vec<Option<EdgeId>> = vec![None; n];
        let mut heap = BinaryHeap::new();
        dist[from] = 0.0;
        heap.push(Item(0.0, from));
        while let Some(Item(d, v)) = heap.pop() {
            if d > dist[v] {
                continue;
            }
            if v == to {
                break;
            }
            for &e in &self.out_edges[v] {
                let edge = &self.edges[e];
                let nd = d + edge.length;
                if nd < dist[edge.to] {
                    dist[edge.to] = nd;
                    via[edge.to] = Some(e);
                    heap.push(Item(nd, edge.to));
                }
            }
        }
        if !dist[to].is_finite() {
            return None;
        }
        let mut path = Vec::new();
        let mut v = to;
        while v != from {
            let e = via[v].expect("finite distance implies a predecessor");
            path.push(e);
            v = self.edges[e].from;
        }
        path.reverse();
        Some((path, dist[to]))
    }
}

/// Parameters of a Manhattan grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub lanes: u32,
    pub speed_limit: f64,
    pub phase_length: f64,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, spacing: f64, lanes: u32) -> Self {
        GridSpec {
            rows,
            cols,
            spacing,
            lanes,
            speed_limit: DEFAULT_SPEED_LIMIT,
            phase_length: DEFAULT_PHASE_LENGTH,
        }
    }

    /// Builds the grid. Vertex `r * cols + c` sits at `(c * spacing, r * spacing)`;
    /// every interior vertex carries a two-phase light (north-south green first,
    /// then east-west).
    pub fn build(&self, max_lanes: u32) -> Result<RoadGraph, RoadError> {
        let (rows, cols, spacing) = (self.rows, self.cols, self.spacing);
        if rows < 2 || cols < 2 || !(spacing > 0.0) {
            return Err(RoadError::GridShape { rows, cols, spacing });
        }
        let id = |r: usize, c: usize| r * cols + c;
        let vertices = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (c as f64 * spacing, r as f64 * spacing)))
            .collect();
        let mut edges = Vec::new();
        let mut add = |a, b| {
            edges.push(EdgeSpec { from: a, to: b, lanes: self.lanes, speed_limit: self.speed_limit });
            edges.push(EdgeSpec { from: b, to: a, lanes: self.lanes, speed_limit: self.speed_limit });
        };
        for r in 0..rows {
            for c in 0..cols - 1 {
                add(id(r, c), id(r, c + 1));
            }
        }
        for r in 0..rows - 1 {
            for c in 0..cols {
                add(id(r, c), id(r + 1, c));
            }
        }
        let vertical = |e: &EdgeSpec| e.from % cols == e.to % cols;
        let mut lights = Vec::new();
        for r in 1..rows - 1 {
            for c in 1..cols - 1 {
                let v = id(r, c);
                let (mut ns, mut ew) = (Vec::new(), Vec::new());
                for (i, e) in edges.iter().enumerate().filter(|(_, e)| e.to == v) {
                    if vertical(e) { ns.push(i) } else { ew.push(i) }
                }
                lights.push(TrafficLight {
                    vertex: v,
                    phase_length: self.phase_length,
                    phases: vec![ns, ew],
                    offset: 0.0,
                });
            }
        }
        RoadGraph::new(vertices, edges, lights, max_lanes)
    }
}

pub fn generate_grid(rows: usize, cols: usize, spacing: f64, lanes: u32) -> Result<RoadGraph, RoadError> {
    GridSpec::new(rows, cols, spacing, lanes).build(DEFAULT_MAX_LANES)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trip {
    pub origin: VertexId,
    pub destination: VertexId,
    pub path: Vec<EdgeId>,
    /// Time parked at the destination before the next trip.
    pub pause: f64,
}

/// Draws a destination uniformly over the other vertices and routes to it.
pub fn plan_trip(
    rng: &mut RngStream,
    graph: &RoadGraph,
    from: VertexId,
    pause_range: (f64, f64),
) -> Result<Trip, RoadError> {
    let n = graph.vertices().len();
    let mut destination = rng.index(n - 1);
    if destination >= from {
        destination += 1;
    }
    let pause = rng.uniform(pause_range.0, pause_range.1);
    let (path, _) = graph
        .shortest_path(from, destination)
        .ok_or(RoadError::Unreachable { from, to: destination })?;
    Ok(Trip { origin: from, destination, path, pause })
}
