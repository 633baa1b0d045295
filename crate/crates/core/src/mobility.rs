//! Microscopic vehicle motion: IDM car following, traffic-light intersection
//! management (IDM-IM) and MOBIL lane changing (IDM-LC).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::road::{plan_trip, EdgeId, RoadError, RoadGraph, Trip, VertexId};
use crate::sim::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum MobilityModel {
    #[serde(rename = "idm-im")]
    IdmIm,
    #[serde(rename = "idm-lc")]
    IdmLc,
}

impl MobilityModel {
    pub const ALL: [MobilityModel; 2] = [MobilityModel::IdmIm, MobilityModel::IdmLc];

    pub fn name(self) -> &'static str {
        match self {
            MobilityModel::IdmIm => "idm-im",
            MobilityModel::IdmLc => "idm-lc",
        }
    }
}

impl fmt::Display for MobilityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MobilityModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MobilityModel::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mobility model `{s}` (valid: idm-im, idm-lc)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdmParams {
    /// Maximal acceleration, m/s².
    pub a_max: f64,
    /// Comfortable deceleration, m/s².
    pub b: f64,
    /// Jam distance, m.
    pub s0: f64,
    /// Safe time headway, s.
    pub headway: f64,
    pub length: f64,
    /// Distance at which a red light starts to act, m.
    pub visibility: f64,
    /// MOBIL re-evaluation period, s.
    pub recalc_step: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            a_max: 0.6,
            b: 0.9,
            s0: 1.0,
            headway: 0.5,
            length: 5.0,
            visibility: 200.0,
            recalc_step: 1.0,
        }
    }
}

impl IdmParams {
    pub fn emergency_decel(&self) -> f64 {
        3.0 * self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobilParams {
    pub politeness: f64,
    pub accel_threshold: f64,
    pub safe_decel_limit: f64,
}

impl Default for MobilParams {
    fn default() -> Self {
        MobilParams {
            politeness: 0.5,
            accel_threshold: 0.5,
            safe_decel_limit: IdmParams::default().b,
        }
    }
}

/// IDM acceleration. `gap = f64::INFINITY` is free road; `dv = v - v_leader`.
/// A non-positive gap returns emergency braking at `3·b`.
pub fn idm_acceleration(v: f64, v0: f64, gap: f64, dv: f64, p: &IdmParams) -> f64 {
    let free = 1.0 - (v / v0).powi(4);
    if gap.is_infinite() {
        return p.a_max * free;
    }
    if gap <= 0.0 {
        return -p.emergency_decel();
    }
    let s_star = p.s0 + v * p.headway + v * dv / (2.0 * (p.a_max * p.b).sqrt());
    // s* is clamped at zero so a fast-receding leader cannot push the term negative.
    let interaction = (s_star.max(0.0) / gap).powi(2);
    p.a_max * (free - interaction)
}

/// Something ahead in a lane, in the follower's edge coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    /// Position of the rear bumper along the follower's edge (may exceed the edge length).
    pub rear: f64,
    pub speed: f64,
}

/// The kinematic view MOBIL and IDM need of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub offset: f64,
    pub speed: f64,
    pub length: f64,
    pub desired_speed: f64,
}

impl Kinematics {
    pub fn as_obstacle(&self) -> Obstacle {
        Obstacle { rear: self.offset - self.length, speed: self.speed }
    }

    pub fn accel_behind(&self, leader: Option<Obstacle>, p: &IdmParams) -> f64 {
        match leader {
            None => idm_acceleration(self.speed, self.desired_speed, f64::INFINITY, 0.0, p),
            Some(o) => idm_acceleration(self.speed, self.desired_speed, o.rear - self.offset, self.speed - o.speed, p),
        }
    }
}

/// Virtual standing leader at the stop line (edge end minus `s0`) when the
/// light governing `edge` is red and the stop line is within visibility.
/// Call only for the first vehicle in its lane.
pub fn intersection_constraint(
    edge: EdgeId,
    offset: f64,
    graph: &RoadGraph,
    t: f64,
    p: &IdmParams,
) -> Option<Obstacle> {
    if !graph.is_red(edge, t) {
        return None;
    }
    let stop_line = graph.edge(edge).length - p.s0;
    let distance = stop_line - offset;
    if distance <= 0.0 || distance > p.visibility {
        return None;
    }
    Some(Obstacle { rear: stop_line, speed: 0.0 })
}

/// Lane neighbourhood of the deciding vehicle: nearest thing ahead and the
/// nearest vehicle behind.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LaneView {
    pub leader: Option<Obstacle>,
    pub follower: Option<Kinematics>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LaneDecision {
    Stay,
    Change { incentive: f64, new_accel: f64 },
}

/// MOBIL: change when own gain plus politeness-weighted follower gains beats
/// the threshold and the new follower is not forced below `-safe_decel_limit`.
pub fn mobil_decide(
    me: &Kinematics,
    current: &LaneView,
    target: &LaneView,
    m: &MobilParams,
    p: &IdmParams,
) -> LaneDecision {
    let me_obstacle = me.as_obstacle();
    if target.leader.is_some_and(|o| o.rear - me.offset <= 0.0)
        || target.follower.is_some_and(|f| me_obstacle.rear - f.offset <= 0.0)
    {
        return LaneDecision::Stay;
    }
    let self_old = me.accel_behind(current.leader, p);
    let self_new = me.accel_behind(target.leader, p);
    let (nf_gain, nf_new) = match &target.follower {
        Some(f) => {
            let new = f.accel_behind(Some(me_obstacle), p);
            (new - f.accel_behind(target.leader, p), new)
        }
        None => (0.0, 0.0),
    };
    if nf_new < -m.safe_decel_limit {
        return LaneDecision::Stay;
    }
    let of_gain = match &current.follower {
        Some(f) => f.accel_behind(current.leader, p) - f.accel_behind(Some(me_obstacle), p),
        None => 0.0,
    };
    let incentive = self_new - self_old + m.politeness * (nf_gain + of_gain);
    if incentive > m.accel_threshold {
        LaneDecision::Change { incentive, new_accel: self_new }
    } else {
        LaneDecision::Stay
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activity {
    Driving,
    /// Parked off-road at the trip destination until the given time.
    Parked { until: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub id: usize,
    pub edge: EdgeId,
    pub lane: u32,
    pub offset: f64,
    pub speed: f64,
    pub accel: f64,
    pub desired_speed: f64,
    pub trip: Trip,
    /// Index of `edge` in `trip.path`.
    pub waypoint: usize,
    pub activity: Activity,
}

impl VehicleState {
    pub fn is_driving(&self) -> bool {
        self.activity == Activity::Driving
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobilityConfig {
    pub model: MobilityModel,
    pub idm: IdmParams,
    pub mobil: MobilParams,
    /// Desired-speed band in m/s.
    pub speed_range: (f64, f64),
    pub pause_range: (f64, f64),
    pub dt: f64,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        MobilityConfig {
            model: MobilityModel::IdmIm,
            idm: IdmParams::default(),
            mobil: MobilParams::default(),
            speed_range: (10.0 / 3.6, 80.0 / 3.6),
            pause_range: (2.0, 6.0),
            dt: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct MobilityStats {
    pub lane_changes: u64,
    /// Non-positive gaps met by the IDM (fail-soft emergency braking).
    pub emergency_brakes: u64,
    pub overlap_clamps: u64,
    pub blocked_entries: u64,
    pub trips_completed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum MobilityError {
    #[error("could not place vehicle {0} without overlapping others")]
    NoRoom(usize),
    #[error(transparent)]
    Road(#[from] RoadError),
}

pub struct MobilityWorld {
    graph: RoadGraph,
    cfg: MobilityConfig,
    vehicles: Vec<VehicleState>,
    time: f64,
    next_recalc: f64,
    rng: RngStream,
    stats: MobilityStats,
}

const EPS: f64 = 1e-9;

impl MobilityWorld {
    /// Places `count` vehicles at random non-overlapping spots, each with a
    /// desired speed from the configured band and a first trip.
    pub fn spawn(graph: RoadGraph, cfg: MobilityConfig, count: usize, mut rng: RngStream) -> Result<Self, MobilityError> {
        let mut vehicles: Vec<VehicleState> = Vec::with_capacity(count);
        let p = &cfg.idm;
        for id in 0..count {
            let desired = rng.uniform(cfg.speed_range.0, cfg.speed_range.1);
            let mut placed = None;
            for _ in 0..1000 {
                let edge = rng.index(graph.edges().len());
                let e = graph.edge(edge);
                let lane = rng.index(e.lanes as usize) as u32;
                let hi = e.length - 2.0 * p.s0;
                if hi <= p.length {
                    continue;
                }
                let offset = rng.uniform(p.length, hi);
                let clear = vehicles
                    .iter()
                    .filter(|v| v.edge == edge && v.lane == lane)
                    .all(|v| (v.offset - offset).abs() >= p.length + p.s0);
                if clear {
                    placed = Some((edge, lane, offset));
                    break;
                }
            }
            let (edge, lane, offset) = placed.ok_or(MobilityError::NoRoom(id))?;
            let next = plan_trip(&mut rng, &graph, graph.edge(edge).to, cfg.pause_range)?;
            let mut path = vec![edge];
            path.extend(&next.path);
            let trip = Trip { origin: graph.edge(edge).from, path, ..next };
            vehicles.push(VehicleState {
                id,
                edge,
                lane,
                offset,
                speed: 0.0,
                accel: 0.0,
                desired_speed: desired,
                trip,
                waypoint: 0,
                activity: Activity::Driving,
            });
        }
        Ok(Self::with_vehicles(graph, cfg, vehicles, rng))
    }

    /// Starts from explicit vehicle states (scripted scenarios).
    pub fn with_vehicles(graph: RoadGraph, cfg: MobilityConfig, vehicles: Vec<VehicleState>, rng: RngStream) -> Self {
        MobilityWorld {
            graph,
            cfg,
            vehicles,
            time: 0.0,
            next_recalc: 0.0,
            rng,
            stats: MobilityStats::default(),
        }
    }

    pub fn graph(&self) -> &RoadGraph {
        &self.graph
    }

    pub fn config(&self) -> &MobilityConfig {
        &self.cfg
    }

    pub fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn stats(&self) -> &MobilityStats {
        &self.stats
    }

    pub fn position(&self, id: usize) -> (f64, f64) {
        let v = &self.vehicles[id];
        self.graph.position(v.edge, v.offset)
    }

    /// Heading in radians (counter-clockwise from +x) of the vehicle's edge.
    pub fn heading(&self, id: usize) -> f64 {
        let e = self.graph.edge(self.vehicles[id].edge);
        let (a, b) = (&self.graph.vertices()[e.from], &self.graph.vertices()[e.to]);
        (b.y - a.y).atan2(b.x - a.x)
    }

    fn kinematics(&self, i: usize) -> Kinematics {
        let v = &self.vehicles[i];
        Kinematics {
            offset: v.offset,
            speed: v.speed,
            length: self.cfg.idm.length,
            desired_speed: v.desired_speed.min(self.graph.edge(v.edge).speed_limit),
        }
    }

    /// Driving vehicles per `[edge][lane]`, front first.
    fn lane_index(&self) -> Vec<Vec<Vec<usize>>> {
        let mut lanes: Vec<Vec<Vec<usize>>> = self
            .graph
            .edges()
            .iter()
            .map(|e| vec![Vec::new(); e.lanes as usize])
            .collect();
        for v in self.vehicles.iter().filter(|v| v.is_driving()) {
            lanes[v.edge][v.lane as usize].push(v.id);
        }
        for lane in lanes.iter_mut().flatten() {
            self.sort_front_first(lane);
        }
        lanes
    }

    fn sort_front_first(&self, lane: &mut [usize]) {
        lane.sort_by(|&a, &b| {
            self.vehicles[b]
                .offset
                .total_cmp(&self.vehicles[a].offset)
                .then(a.cmp(&b))
        });
    }

    /// Constraint seen by whoever is first in `(edge, lane)` at `offset`:
    /// red light and the rearmost vehicle on the next trip edge.
    fn head_obstacle(&self, i: usize, lane: u32, offset: f64, lanes: &[Vec<Vec<usize>>]) -> Option<Obstacle> {
        let v = &self.vehicles[i];
        let p = &self.cfg.idm;
        let mut best = intersection_constraint(v.edge, offset, &self.graph, self.time, p);
        let edge_len = self.graph.edge(v.edge).length;
        if let Some(&next) = v.trip.path.get(v.waypoint + 1) {
            let next_lane = lane.min(self.graph.edge(next).lanes - 1) as usize;
            if let Some(&last) = lanes[next].get(next_lane).and_then(|l| l.last()) {
                let o = Obstacle {
                    rear: edge_len + self.vehicles[last].offset - p.length,
                    speed: self.vehicles[last].speed,
                };
                if o.rear - offset <= p.visibility && best.is_none_or(|b| o.rear < b.rear) {
                    best = Some(o);
                }
            }
        }
        best
    }

    /// Lane view for vehicle `i` placed in `lane` (which may differ from its own).
    fn view(&self, i: usize, lane: u32, lanes: &[Vec<Vec<usize>>]) -> LaneView {
        let v = &self.vehicles[i];
        let members = &lanes[v.edge][lane as usize];
        let (mut ahead, mut behind) = (None, None);
        for &j in members {
            if j == i {
                continue;
            }
            let o = self.vehicles[j].offset;
            if o > v.offset || (o == v.offset && j < i) {
                ahead = Some(j);
            } else if behind.is_none() {
                behind = Some(j);
            }
        }
        let leader = match ahead {
            Some(j) => Some(self.kinematics(j).as_obstacle()),
            None => self.head_obstacle(i, lane, v.offset, lanes),
        };
        LaneView { leader, follower: behind.map(|j| self.kinematics(j)) }
    }

    fn mobil_pass(&mut self, lanes: &mut [Vec<Vec<usize>>]) {
        for i in 0..self.vehicles.len() {
            let v = &self.vehicles[i];
            if !v.is_driving() {
                continue;
            }
            let n_lanes = self.graph.edge(v.edge).lanes;
            if n_lanes < 2 {
                continue;
            }
            let me = self.kinematics(i);
            let current = self.view(i, v.lane, lanes);
            let mut best: Option<(u32, f64)> = None;
            let candidates = [v.lane.checked_sub(1), Some(v.lane + 1).filter(|&l| l < n_lanes)];
            for target_lane in candidates.into_iter().flatten() {
                let target = self.view(i, target_lane, lanes);
                if let LaneDecision::Change { incentive, .. } =
                    mobil_decide(&me, &current, &target, &self.cfg.mobil, &self.cfg.idm)
                {
                    if best.is_none_or(|(_, b)| incentive > b) {
                        best = Some((target_lane, incentive));
                    }
                }
            }
            if let Some((target_lane, _)) = best {
                let edge = self.vehicles[i].edge;
                let old = self.vehicles[i].lane as usize;
                lanes[edge][old].retain(|&j| j != i);
                self.vehicles[i].lane = target_lane;
                let mut list = std::mem::take(&mut lanes[edge][target_lane as usize]);
                list.push(i);
                self.sort_front_first(&mut list);
                lanes[edge][target_lane as usize] = list;
                self.stats.lane_changes += 1;
            }
        }
    }

    /// Advances the world by `dt` seconds.
    pub fn step(&mut self, dt: f64) {
        assert!(dt > 0.0, "step size must be positive");
        let mut lanes = self.lane_index();
        if self.cfg.model == MobilityModel::IdmLc && self.time + EPS >= self.next_recalc {
            self.mobil_pass(&mut lanes);
        }
        if self.time + EPS >= self.next_recalc {
            self.next_recalc += self.cfg.idm.recalc_step;
        }

        // Accelerations from the (post lane change) snapshot.
        let p = self.cfg.idm.clone();
        let mut accels = vec![0.0; self.vehicles.len()];
        for lane in lanes.iter().flatten() {
            for (k, &i) in lane.iter().enumerate() {
                let me = self.kinematics(i);
                let leader = match k {
                    0 => self.head_obstacle(i, self.vehicles[i].lane, me.offset, &lanes),
                    _ => Some(self.kinematics(lane[k - 1]).as_obstacle()),
                };
                if leader.is_some_and(|o| o.rear - me.offset <= 0.0) {
                    self.stats.emergency_brakes += 1;
                }
                accels[i] = me.accel_behind(leader, &p);
            }
        }

        // Ballistic update, stopping exactly when speed would go negative.
        for v in self.vehicles.iter_mut().filter(|v| v.is_driving()) {
            let a = accels[v.id];
            let nv = v.speed + a * dt;
            if nv < 0.0 {
                v.offset -= v.speed * v.speed / (2.0 * a);
                v.accel = -v.speed / dt;
                v.speed = 0.0;
            } else {
                v.offset += v.speed * dt + 0.5 * a * dt * dt;
                v.accel = a;
                v.speed = nv;
            }
        }

        // Same-lane overlap guard, front to back.
        for lane in lanes.iter_mut().flatten() {
            self.sort_front_first(lane);
            for k in 1..lane.len() {
                let (lead, me) = (lane[k - 1], lane[k]);
                let limit = self.vehicles[lead].offset - p.length;
                if self.vehicles[me].offset > limit {
                    let lead_speed = self.vehicles[lead].speed;
                    let v = &mut self.vehicles[me];
                    v.offset = limit;
                    v.speed = v.speed.min(lead_speed);
                    self.stats.overlap_clamps += 1;
                }
            }
        }

        self.time += dt;
        self.cross_edges(&mut lanes);
        self.resume_parked(&mut lanes);
    }

    fn cross_edges(&mut self, lanes: &mut [Vec<Vec<usize>>]) {
        let mut crossing: Vec<usize> = self
            .vehicles
            .iter()
            .filter(|v| v.is_driving() && v.offset > self.graph.edge(v.edge).length)
            .map(|v| v.id)
            .collect();
        let over = |w: &Self, i: usize| w.vehicles[i].offset - w.graph.edge(w.vehicles[i].edge).length;
        crossing.sort_by(|&a, &b| over(self, b).total_cmp(&over(self, a)).then(a.cmp(&b)));
        for i in crossing {
            let v = &self.vehicles[i];
            let (edge, lane, overshoot) = (v.edge, v.lane, over(self, i));
            let Some(&next) = v.trip.path.get(v.waypoint + 1) else {
                // Arrived.
                let until = self.time + v.trip.pause;
                let v = &mut self.vehicles[i];
                v.offset = self.graph.edge(edge).length;
                v.speed = 0.0;
                v.accel = 0.0;
                v.activity = Activity::Parked { until };
                lanes[edge][lane as usize].retain(|&j| j != i);
                self.stats.trips_completed += 1;
                continue;
            };
            let next_len = self.graph.edge(next).length;
            let entry = overshoot.min(next_len);
            let preferred = lane.min(self.graph.edge(next).lanes - 1);
            match self.free_entry_lane(next, preferred, entry, lanes) {
                Some(l) => {
                    lanes[edge][lane as usize].retain(|&j| j != i);
                    let v = &mut self.vehicles[i];
                    v.edge = next;
                    v.lane = l;
                    v.offset = entry;
                    v.waypoint += 1;
                    lanes[next][l as usize].push(i);
                }
                None => {
                    let v = &mut self.vehicles[i];
                    v.offset = self.graph.edge(edge).length;
                    v.speed = 0.0;
                    self.stats.blocked_entries += 1;
                }
            }
        }
    }

    /// A lane of `edge` whose rearmost vehicle leaves room for a front bumper
    /// at `entry`, preferring `preferred` and then the nearest lanes.
    fn free_entry_lane(&self, edge: EdgeId, preferred: u32, entry: f64, lanes: &[Vec<Vec<usize>>]) -> Option<u32> {
        let n = self.graph.edge(edge).lanes;
        let mut order: Vec<u32> = (0..n).collect();
        order.sort_by_key(|&l| (l.abs_diff(preferred), l));
        order.into_iter().find(|&l| {
            lanes[edge][l as usize]
                .iter()
                .all(|&j| self.vehicles[j].offset - self.cfg.idm.length >= entry)
        })
    }

    fn resume_parked(&mut self, lanes: &mut [Vec<Vec<usize>>]) {
        for i in 0..self.vehicles.len() {
            let Activity::Parked { until } = self.vehicles[i].activity else {
                continue;
            };
            if self.time + EPS < until {
                continue;
            }
            let here: VertexId = self.graph.edge(self.vehicles[i].edge).to;
            let trip = match plan_trip(&mut self.rng, &self.graph, here, self.cfg.pause_range) {
                Ok(trip) => trip,
                Err(_) => {
                    self.vehicles[i].activity = Activity::Parked { until: self.time + self.cfg.pause_range.0 };
                    continue;
                }
            };
            let first = trip.path[0];
            let lane_count = self.graph.edge(first).lanes;
            let preferred = self.rng.index(lane_count as usize) as u32;
            let Some(lane) = self.free_entry_lane(first, preferred, 0.0, lanes) else {
                self.vehicles[i].activity = Activity::Parked { until: self.time + self.cfg.dt };
                continue;
            };
            let v = &mut self.vehicles[i];
            v.trip = trip;
            v.edge = first;
            v.lane = lane;
            v.offset = 0.0;
            v.speed = 0.0;
            v.accel = 0.0;
            v.waypoint = 0;
            v.activity = Activity::Driving;
            lanes[first][lane as usize].push(i);
        }
    }

    /// Smallest same-lane bumper gap among driving vehicles, if any pair exists.
    pub fn min_same_lane_gap(&self) -> Option<f64> {
        let lanes = self.lane_index();
        lanes
            .iter()
            .flatten()
            .flat_map(|lane| {
                lane.windows(2).map(|w| {
                    self.vehicles[w[0]].offset - self.cfg.idm.length - self.vehicles[w[1]].offset
                })
            })
            .reduce(f64::min)
    }
}

/// Header of the mobility trace; one row per vehicle per whole second.
pub const MOBILITY_TRACE_HEADER: &str = "# t vehicle_id x y speed";

/// Steps `world` with its configured `dt` up to `until`, writing a snapshot of
/// every vehicle at each whole second, the current time included.
pub fn write_mobility_trace<W: std::io::Write>(world: &mut MobilityWorld, until: f64, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{MOBILITY_TRACE_HEADER}")?;
    let dt = world.config().dt;
    let mut next = world.time().ceil();
    while next <= until + EPS {
        while world.time() < next - EPS {
            world.step(dt);
        }
        for (i, v) in world.vehicles().iter().enumerate() {
            let (x, y) = world.position(i);
            writeln!(out, "{next:.0} {} {x:.3} {y:.3} {:.3}", v.id, v.speed)?;
        }
        next += 1.0;
    }
    Ok(())
}
