//! The integrated run: vehicles (or fixed nodes) with a shared radio
//! channel, per-node DCF and interface queue, a router per node, CBR and
//! beacon agents, and the packet trace.
//!
//! Every traced packet ends with exactly one terminal fate: a receive
//! record, a drop record, or an `end-of-run` drop written when the clock
//! reaches the configured duration.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::agents::{setup_flows, AgentError, CbrFlow, EmergencyGate, SafetyBeacon, TrafficConfig};
use crate::mac::{BusyEffect, Dcf, DropTailQueue, MacParams, MacParamsError};
use crate::mobility::{MobilityStats, MobilityWorld};
use crate::phy::{self, PhyConfig, PhyError};
use crate::routing::{Action, ControlMsg, Ctx, DataPacket, Dest, NodeId, Router, RoutingConfig};
use crate::sim::{EventHandle, RngStream, Scheduler, SimTime};
use crate::trace::{quantize, DropReason, Layer, PacketKind, TraceEvent, TraceRecord};

/// Initial hop limit of data packets.
pub const DEFAULT_TTL: u8 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub phy: PhyConfig,
    pub mac: MacParams,
    pub routing: RoutingConfig,
    pub traffic: TrafficConfig,
    pub duration: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            phy: PhyConfig::default(),
            mac: MacParams::default(),
            routing: RoutingConfig::default(),
            traffic: TrafficConfig::default(),
            duration: 100.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Mac(#[from] MacParamsError),
    #[error(transparent)]
    Phy(#[from] PhyError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("{0}")]
    Invalid(String),
}

/// Explicit connectivity instead of a radio model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkTable {
    pub nodes: u32,
    links: BTreeSet<(NodeId, NodeId)>,
    /// Independent per-frame loss probability on every link.
    pub loss: f64,
    /// Overlapping frames at a receiver destroy each other.
    pub collisions: bool,
}

impl LinkTable {
    /// Lossless, collision-free links.
    pub fn perfect(nodes: u32, edges: &[(NodeId, NodeId)]) -> Self {
        let mut t = LinkTable { nodes, links: BTreeSet::new(), loss: 0.0, collisions: false };
        for &(a, b) in edges {
            t.link(a, b);
        }
        t
    }

    pub fn link(&mut self, a: NodeId, b: NodeId) {
        self.links.insert((a.min(b), a.max(b)));
    }

    pub fn unlink(&mut self, a: NodeId, b: NodeId) {
        self.links.remove(&(a.min(b), a.max(b)));
    }

    pub fn connected(&self, a: NodeId, b: NodeId) -> bool {
        self.links.contains(&(a.min(b), a.max(b)))
    }
}

pub enum Topology {
    /// Vehicles on a road graph; node `i` is vehicle `i`.
    Road(Box<MobilityWorld>),
    /// Fixed positions under the radio model.
    Static(Vec<(f64, f64)>),
    Links(LinkTable),
}

impl Topology {
    pub fn node_count(&self) -> u32 {
        match self {
            Topology::Road(w) => w.vehicles().len() as u32,
            Topology::Static(p) => p.len() as u32,
            Topology::Links(t) => t.nodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Data(DataPacket),
    Control(ControlMsg),
    Beacon(SafetyBeacon),
}

#[derive(Debug, Clone, PartialEq)]
struct Frame {
    dest: Dest,
    seq: u32,
    /// Bytes above the MAC header.
    payload: u32,
    trace_id: u64,
    kind: PacketKind,
    body: Body,
}

#[derive(Debug, Clone)]
enum Air {
    Frame(Frame),
    Ack { to: NodeId },
}

#[derive(Debug, Clone, Copy)]
struct Rx {
    node: NodeId,
    power: f64,
    faded: bool,
    corrupted: bool,
}

#[derive(Debug, Clone)]
struct Transmission {
    sender: NodeId,
    air: Air,
    rx: Vec<Rx>,
}

#[derive(Debug, Clone)]
enum Ev {
    Mobility,
    Cbr { flow: u32, k: u64 },
    Beacon,
    MacFire,
    TxEnd { tx: u64 },
    AckSend { to: NodeId },
    AckTimeout,
    Routing(crate::routing::RouterTimer),
}

struct Node {
    router: Router,
    queue: DropTailQueue<Frame>,
    dcf: Dcf,
    in_service: bool,
    fire: Option<EventHandle>,
    ack_timer: Option<EventHandle>,
    /// Own transmission on the air.
    tx: Option<u64>,
    /// Transmissions currently arriving here, with the index of our `Rx` entry.
    incoming: Vec<(u64, usize)>,
    next_seq: u32,
    last_seq_from: HashMap<NodeId, u32>,
    /// Head-of-line unicast: decoded by its receiver at least once.
    head_decoded: bool,
    head_cause: DropReason,
    gate: EmergencyGate,
}

#[derive(Debug, Clone, Copy)]
struct Open {
    kind: PacketKind,
    flow: Option<u32>,
    node: NodeId,
    size: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct NetworkStats {
    pub transmissions: u64,
    pub acks: u64,
    /// Receiver-side frame losses to overlap, including half-duplex.
    pub collisions: u64,
    pub retries: u64,
    pub link_breaks: u64,
    pub beacons: u64,
    pub emergency_beacons: u64,
    /// Longest interface queue seen at any node.
    pub max_queue: usize,
}

pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub stats: NetworkStats,
    pub mobility: Option<MobilityStats>,
    pub flows: Vec<CbrFlow>,
}

pub struct Network {
    cfg: NetworkConfig,
    topology: Topology,
    positions: Vec<(f64, f64)>,
    nodes: Vec<Node>,
    flows: Vec<CbrFlow>,
    sched: Scheduler<Ev>,
    active: BTreeMap<u64, Transmission>,
    next_tx: u64,
    next_packet: u64,
    open: BTreeMap<u64, Open>,
    trace: Vec<TraceRecord>,
    stats: NetworkStats,
    rng_channel: RngStream,
    rng_mac: RngStream,
    rng_routing: RngStream,
    /// Radio settings with the transmit power resolved.
    tx_params: phy::TxParams,
    cs_range: f64,
    emergency_decel: f64,
    finished: bool,
}

impl Network {
    /// Builds a run with flows drawn by `setup_flows` on the "traffic" stream.
    pub fn new(cfg: NetworkConfig, topology: Topology) -> Result<Self, NetworkError> {
        let mut rng = RngStream::new(cfg.seed, "traffic");
        let t = &cfg.traffic;
        let flows = setup_flows(&mut rng, t.cbr_connections, topology.node_count(), t.packet_size, t.rate, cfg.duration)?;
        Self::build(cfg, topology, flows, rng)
    }

    pub fn with_flows(cfg: NetworkConfig, topology: Topology, flows: Vec<CbrFlow>) -> Result<Self, NetworkError> {
        let rng = RngStream::new(cfg.seed, "traffic");
        Self::build(cfg, topology, flows, rng)
    }

    fn build(cfg: NetworkConfig, topology: Topology, flows: Vec<CbrFlow>, mut rng_traffic: RngStream) -> Result<Self, NetworkError> {
        cfg.mac.validate()?;
        cfg.phy.nakagami.validate()?;
        if !(cfg.duration > 0.0 && cfg.duration.is_finite()) {
            return Err(NetworkError::Invalid(format!("duration must be positive, got {}", cfg.duration)));
        }
        if cfg.traffic.beacons && !(cfg.traffic.beacon_interval > 0.0) {
            return Err(NetworkError::Invalid("beacon_interval must be positive".into()));
        }
        if let Topology::Links(t) = &topology {
            if !(0.0..=1.0).contains(&t.loss) {
                return Err(NetworkError::Invalid(format!("link loss {} outside [0, 1]", t.loss)));
            }
        }
        let n = topology.node_count();
        for f in &flows {
            f.validate()?;
            if f.src >= n || f.dst >= n {
                return Err(NetworkError::Invalid(format!("flow {} names a node outside 0..{n}", f.flow_id)));
            }
        }
        let positions = match &topology {
            Topology::Road(w) => (0..n as usize).map(|i| w.position(i)).collect(),
            Topology::Static(p) => p.clone(),
            Topology::Links(_) => Vec::new(),
        };
        let emergency_decel = match (&topology, cfg.traffic.emergency_decel) {
            (_, Some(d)) => d,
            (Topology::Road(w), None) => w.config().idm.emergency_decel(),
            _ => f64::INFINITY,
        };
        let nodes = (0..n)
            .map(|i| Node {
                router: Router::new(&cfg.routing, i),
                queue: DropTailQueue::new(cfg.mac.queue_capacity),
                dcf: Dcf::new(&cfg.mac),
                in_service: false,
                fire: None,
                ack_timer: None,
                tx: None,
                incoming: Vec::new(),
                next_seq: 0,
                last_seq_from: HashMap::new(),
                head_decoded: false,
                head_cause: DropReason::Fading,
                gate: EmergencyGate::default(),
            })
            .collect();
        let tx_params = phy::TxParams { tx_power: Some(phy::tx_power(&cfg.phy.nakagami, &cfg.phy.tx)), ..cfg.phy.tx.clone() };
        let cs_range = phy::range_for(cfg.phy.tx.carrier_sense_threshold, &cfg.phy.nakagami, &tx_params);
        let mut net = Network {
            rng_channel: RngStream::new(cfg.seed, "channel"),
            rng_mac: RngStream::new(cfg.seed, "mac"),
            rng_routing: RngStream::new(cfg.seed, "routing"),
            cfg,
            topology,
            positions,
            nodes,
            flows,
            sched: Scheduler::new(),
            active: BTreeMap::new(),
            next_tx: 0,
            next_packet: 0,
            open: BTreeMap::new(),
            trace: Vec::new(),
            stats: NetworkStats::default(),
            tx_params,
            cs_range,
            emergency_decel,
            finished: false,
        };
        if let Topology::Road(w) = &net.topology {
            net.sched.schedule_in(w.config().dt, 0, Ev::Mobility);
        }
        for i in 0..n {
            let mut ctx = Ctx::new(0.0, i, &mut net.rng_routing);
            net.nodes[i as usize].router.start(&mut ctx);
            let actions = ctx.actions;
            net.apply(i, actions);
        }
        if net.cfg.traffic.beacons {
            for i in 0..n {
                let phase = rng_traffic.uniform(0.0, net.cfg.traffic.beacon_interval);
                net.sched.schedule_in(phase, i, Ev::Beacon);
            }
        }
        for (idx, f) in net.flows.iter().enumerate() {
            net.sched.schedule_in(f.start, f.src, Ev::Cbr { flow: idx as u32, k: 0 });
        }
        Ok(net)
    }

    pub fn node_count(&self) -> u32 {
        self.nodes.len() as u32
    }

    pub fn now(&self) -> f64 {
        self.sched.now().secs()
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn flows(&self) -> &[CbrFlow] {
        &self.flows
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn stats(&self) -> &NetworkStats {
        &self.stats
    }

    pub fn router(&self, node: NodeId) -> &Router {
        &self.nodes[node as usize].router
    }

    pub fn mobility(&self) -> Option<&MobilityWorld> {
        match &self.topology {
            Topology::Road(w) => Some(w),
            _ => None,
        }
    }

    pub fn links_mut(&mut self) -> Option<&mut LinkTable> {
        match &mut self.topology {
            Topology::Links(t) => Some(t),
            _ => None,
        }
    }

    /// Fixes the next backoff draws of `node` (deterministic MAC scenarios).
    pub fn script_backoffs(&mut self, node: NodeId, values: impl IntoIterator<Item = u32>) {
        self.nodes[node as usize].dcf.script_backoffs(values);
    }

    pub fn queue_len(&self, node: NodeId) -> usize {
        self.nodes[node as usize].queue.len()
    }

    /// Advances the clock to `min(t, duration)`.
    pub fn run_until(&mut self, t: f64) {
        let horizon = SimTime::from_secs(t.min(self.cfg.duration));
        while let Some(ev) = self.sched.pop_until(horizon) {
            self.dispatch(ev.target, ev.payload);
        }
        if horizon > self.sched.now() {
            self.sched.advance_to(horizon).expect("horizon is ahead of the clock");
        }
    }

    /// Runs to the configured duration and closes every open packet.
    pub fn finish(mut self) -> RunOutput {
        self.run_until(self.cfg.duration);
        self.close();
        let mobility = self.mobility().map(|w| w.stats().clone());
        RunOutput { trace: self.trace, stats: self.stats, mobility, flows: self.flows }
    }

    fn close(&mut self) {
        if self.finished {
            return;
        }
        self.finished = true;
        let open = std::mem::take(&mut self.open);
        for (id, o) in open {
            self.record(TraceEvent::Dropped, DropReason::EndOfRun, Layer::Mac, o.kind, id, o.flow, o.node, o.size);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        event: TraceEvent,
        reason: DropReason,
        layer: Layer,
        kind: PacketKind,
        packet_id: u64,
        flow_id: Option<u32>,
        node: NodeId,
        size: u32,
    ) {
        self.trace.push(TraceRecord {
            time_ns: quantize(self.now()),
            event,
            reason,
            layer,
            kind,
            packet_id,
            flow_id,
            node,
            size,
        });
    }

    fn originate(&mut self, kind: PacketKind, layer: Layer, flow: Option<u32>, node: NodeId, size: u32) -> u64 {
        let id = self.next_packet;
        self.next_packet += 1;
        self.open.insert(id, Open { kind, flow, node, size });
        self.record(TraceEvent::Sent, DropReason::None, layer, kind, id, flow, node, size);
        id
    }

    /// Terminal drop; ignored if the packet already has a fate.
    fn drop_packet(&mut self, id: u64, reason: DropReason, layer: Layer, node: NodeId) {
        if let Some(o) = self.open.remove(&id) {
            self.record(TraceEvent::Dropped, reason, layer, o.kind, id, o.flow, node, o.size);
        }
    }

    fn dispatch(&mut self, node: NodeId, ev: Ev) {
        match ev {
            Ev::Mobility => self.on_mobility(),
            Ev::Cbr { flow, k } => self.on_cbr(flow, k),
            Ev::Beacon => {
                self.send_beacon(node, false);
                let next = self.now() + self.cfg.traffic.beacon_interval;
                if next < self.cfg.duration {
                    self.sched.schedule_in(self.cfg.traffic.beacon_interval, node, Ev::Beacon);
                }
            }
            Ev::MacFire => self.on_fire(node),
            Ev::TxEnd { tx } => self.on_tx_end(tx),
            Ev::AckSend { to } => {
                if self.nodes[node as usize].tx.is_none() {
                    self.stats.acks += 1;
                    self.begin_tx(node, Air::Ack { to });
                }
            }
            Ev::AckTimeout => self.on_ack_timeout(node),
            Ev::Routing(timer) => {
                let mut ctx = Ctx::new(self.now(), node, &mut self.rng_routing);
                self.nodes[node as usize].router.on_timer(&mut ctx, timer);
                let actions = ctx.actions;
                self.apply(node, actions);
            }
        }
    }

    fn on_mobility(&mut self) {
        let Topology::Road(world) = &mut self.topology else { return };
        let dt = world.config().dt;
        world.step(dt);
        for (i, p) in self.positions.iter_mut().enumerate() {
            *p = world.position(i);
        }
        let accels: Vec<f64> = world.vehicles().iter().map(|v| v.accel).collect();
        let now = self.now();
        for (i, a) in accels.into_iter().enumerate() {
            let (thr, gap) = (self.emergency_decel, self.cfg.traffic.emergency_min_interval);
            if self.cfg.traffic.beacons && self.nodes[i].gate.try_fire(a, thr, now, gap) {
                self.stats.emergency_beacons += 1;
                self.send_beacon(i as NodeId, true);
            }
        }
        if now + dt <= self.cfg.duration + 1e-9 {
            self.sched.schedule_in(dt, 0, Ev::Mobility);
        }
    }

    fn on_cbr(&mut self, flow: u32, k: u64) {
        let f = self.flows[flow as usize].clone();
        let id = self.originate(PacketKind::Cbr, Layer::App, Some(f.flow_id), f.src, f.packet_size);
        let pkt = DataPacket {
            id,
            flow: f.flow_id,
            src: f.src,
            dst: f.dst,
            size: f.packet_size,
            ttl: DEFAULT_TTL,
            seq: k as u32,
            created: self.now(),
        };
        let mut ctx = Ctx::new(self.now(), f.src, &mut self.rng_routing);
        self.nodes[f.src as usize].router.on_data(&mut ctx, pkt);
        let actions = ctx.actions;
        self.apply(f.src, actions);
        if let Some(t) = f.emission_time(k + 1) {
            if t < self.cfg.duration {
                self.sched
                    .schedule(SimTime::from_secs(t), f.src, Ev::Cbr { flow, k: k + 1 })
                    .expect("emission grid moves forward");
            }
        }
    }

    /// Queues a beacon at `node` now, outside its periodic schedule.
    pub fn send_beacon(&mut self, node: NodeId, emergency: bool) {
        let (x, y) = self.positions.get(node as usize).copied().unwrap_or((0.0, 0.0));
        let (speed, heading) = match &self.topology {
            Topology::Road(w) => (w.vehicles()[node as usize].speed, w.heading(node as usize)),
            _ => (0.0, 0.0),
        };
        let beacon = SafetyBeacon { sender: node, x, y, speed, heading, timestamp: self.now(), emergency };
        let size = self.cfg.traffic.beacon_size;
        self.stats.beacons += 1;
        let id = self.originate(PacketKind::Pbc, Layer::App, None, node, size);
        let frame = self.frame(node, Dest::Broadcast, size, id, PacketKind::Pbc, Body::Beacon(beacon));
        self.enqueue(node, frame);
    }

    fn frame(&mut self, node: NodeId, dest: Dest, payload: u32, trace_id: u64, kind: PacketKind, body: Body) -> Frame {
        let n = &mut self.nodes[node as usize];
        n.next_seq = n.next_seq.wrapping_add(1);
        Frame { dest, seq: n.next_seq, payload, trace_id, kind, body }
    }

    fn apply(&mut self, node: NodeId, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::SendData { pkt, next_hop } => {
                    if pkt.src != node {
                        self.record(TraceEvent::Forwarded, DropReason::None, Layer::Routing, PacketKind::Cbr, pkt.id, Some(pkt.flow), node, pkt.size);
                    }
                    if let Some(o) = self.open.get_mut(&pkt.id) {
                        o.node = node;
                    }
                    let (id, size) = (pkt.id, pkt.size);
                    let frame = self.frame(node, Dest::Unicast(next_hop), size, id, PacketKind::Cbr, Body::Data(pkt));
                    self.enqueue(node, frame);
                }
                Action::DropData { pkt, reason } => self.drop_packet(pkt.id, reason, Layer::Routing, node),
                Action::SendControl { msg, to } => {
                    let size = msg.size();
                    let id = self.originate(PacketKind::Control, Layer::Mac, None, node, size);
                    let frame = self.frame(node, to, size, id, PacketKind::Control, Body::Control(msg));
                    self.enqueue(node, frame);
                }
                Action::Timer { delay, timer } => {
                    self.sched.schedule_in(delay, node, Ev::Routing(timer));
                }
            }
        }
    }

    fn enqueue(&mut self, node: NodeId, frame: Frame) {
        let n = &mut self.nodes[node as usize];
        match n.queue.enqueue(frame) {
            Ok(()) => {
                self.stats.max_queue = self.stats.max_queue.max(n.queue.len());
                if !n.in_service {
                    self.start_service(node);
                }
            }
            Err(frame) => self.drop_packet(frame.trace_id, DropReason::Ifq, Layer::Mac, node),
        }
    }

    fn start_service(&mut self, node: NodeId) {
        let now = self.now();
        let n = &mut self.nodes[node as usize];
        if n.queue.is_empty() {
            n.in_service = false;
            return;
        }
        if n.dcf.is_contending() || n.ack_timer.is_some() || n.tx.is_some_and(|_| n.in_service) {
            return;
        }
        if !n.in_service {
            n.in_service = true;
            n.head_decoded = false;
            n.head_cause = DropReason::Fading;
        }
        if let Some(t) = n.dcf.start_contention(now, &self.cfg.mac, &mut self.rng_mac) {
            n.fire = Some(self.sched.schedule(SimTime::from_secs(t), node, Ev::MacFire).expect("backoff ends in the future"));
        }
    }

    fn finish_head(&mut self, node: NodeId) {
        let n = &mut self.nodes[node as usize];
        n.queue.pop_front();
        n.dcf.on_success(&self.cfg.mac);
        n.in_service = false;
        self.start_service(node);
    }

    fn on_fire(&mut self, node: NodeId) {
        let n = &mut self.nodes[node as usize];
        n.fire = None;
        n.dcf.fired();
        let frame = n.queue.front().expect("contending with an empty queue").clone();
        self.begin_tx(node, Air::Frame(frame));
    }

    /// Mean received power (mW) from `a` at `b`, or `None` below carrier sense.
    fn mean_power(&self, a: NodeId, b: NodeId) -> Option<(f64, f64)> {
        match &self.topology {
            Topology::Links(t) => t.connected(a, b).then_some((1.0, 0.0)),
            _ => {
                let (pa, pb) = (self.positions[a as usize], self.positions[b as usize]);
                let d = (pa.0 - pb.0).hypot(pa.1 - pb.1);
                if d > self.cs_range {
                    return None;
                }
                let np = &self.cfg.phy.nakagami;
                let d = d.max(np.ref_distance);
                let dbm = phy::mean_rx_power(d, np, &self.tx_params).expect("distance is positive");
                (dbm >= self.cfg.phy.tx.carrier_sense_threshold).then(|| (phy::dbm_to_mw(dbm), d))
            }
        }
    }

    fn begin_tx(&mut self, sender: NodeId, air: Air) {
        let now = self.now();
        let duration = match &air {
            Air::Frame(f) => self.cfg.mac.frame_duration(f.payload),
            Air::Ack { .. } => self.cfg.mac.ack_duration(),
        };
        let tx_id = self.next_tx;
        self.next_tx += 1;
        self.stats.transmissions += 1;

        // Half duplex: whatever we were receiving is lost.
        let incoming = std::mem::take(&mut self.nodes[sender as usize].incoming);
        for &(k, idx) in &incoming {
            let r = &mut self.active.get_mut(&k).expect("incoming tx is active").rx[idx];
            if !r.corrupted {
                r.corrupted = true;
                self.stats.collisions += 1;
            }
        }
        self.nodes[sender as usize].incoming = incoming;

        let rx_threshold_mw = phy::dbm_to_mw(self.cfg.phy.tx.rx_threshold);
        let margin = self.cfg.phy.tx.capture_margin;
        let mut rx = Vec::new();
        for j in 0..self.nodes.len() as NodeId {
            if j == sender {
                continue;
            }
            let Some((mean, d)) = self.mean_power(sender, j) else { continue };
            let (power, faded) = match &self.topology {
                Topology::Links(t) => (mean, t.loss > 0.0 && self.rng_channel.uniform(0.0, 1.0) < t.loss),
                _ if self.cfg.phy.fading => {
                    let p = phy::sample_around(&mut self.rng_channel, mean, self.cfg.phy.nakagami.shape(d));
                    (p, p < rx_threshold_mw)
                }
                _ => (mean, mean < rx_threshold_mw),
            };
            let mut me = Rx { node: j, power, faded, corrupted: self.nodes[j as usize].tx.is_some() };
            let collisions = match &self.topology {
                Topology::Links(t) => t.collisions,
                _ => true,
            };
            if collisions {
                for &(k, idx) in &self.nodes[j as usize].incoming {
                    let other = &mut self.active.get_mut(&k).expect("incoming tx is active").rx[idx];
                    if phy::interferes(me.power, other.power, margin) {
                        me.corrupted = true;
                    }
                    if phy::interferes(other.power, me.power, margin) && !other.corrupted {
                        other.corrupted = true;
                        self.stats.collisions += 1;
                    }
                }
            }
            if me.corrupted {
                self.stats.collisions += 1;
            }
            self.nodes[j as usize].incoming.push((tx_id, rx.len()));
            rx.push(me);
        }
        // Carrier sense at every receiver and at the sender itself.
        let sensing: Vec<NodeId> = rx.iter().map(|r| r.node).chain(std::iter::once(sender)).collect();
        for j in sensing {
            let n = &mut self.nodes[j as usize];
            if n.dcf.on_busy(now, &self.cfg.mac) == BusyEffect::Frozen {
                if let Some(h) = n.fire.take() {
                    self.sched.cancel(h);
                }
            }
        }
        self.nodes[sender as usize].tx = Some(tx_id);
        self.active.insert(tx_id, Transmission { sender, air, rx });
        self.sched.schedule_in(duration, sender, Ev::TxEnd { tx: tx_id });
    }

    fn on_tx_end(&mut self, tx_id: u64) {
        let now = self.now();
        let tx = self.active.remove(&tx_id).expect("ending tx is active");
        self.nodes[tx.sender as usize].tx = None;
        for r in &tx.rx {
            self.nodes[r.node as usize].incoming.retain(|&(k, _)| k != tx_id);
        }
        let sensing: Vec<NodeId> = tx.rx.iter().map(|r| r.node).chain(std::iter::once(tx.sender)).collect();
        for j in sensing {
            let n = &mut self.nodes[j as usize];
            if let Some(t) = n.dcf.on_idle(now, &self.cfg.mac) {
                n.fire = Some(self.sched.schedule(SimTime::from_secs(t), j, Ev::MacFire).expect("resume is in the future"));
            }
        }
        let decoded = |r: &Rx| !r.faded && !r.corrupted;
        match tx.air {
            Air::Ack { to } => {
                if tx.rx.iter().any(|r| r.node == to && decoded(r)) {
                    self.on_ack(to, tx.sender);
                }
            }
            Air::Frame(frame) => match frame.dest {
                Dest::Broadcast => {
                    let mut any = false;
                    for r in tx.rx.iter().filter(|r| decoded(r)) {
                        any = true;
                        self.deliver(r.node, tx.sender, &frame);
                    }
                    if !any {
                        let reason = if tx.rx.iter().any(|r| r.corrupted) { DropReason::Collision } else { DropReason::Fading };
                        self.drop_packet(frame.trace_id, reason, Layer::Mac, tx.sender);
                    }
                    self.finish_head(tx.sender);
                }
                Dest::Unicast(to) => {
                    let target = tx.rx.iter().find(|r| r.node == to).copied();
                    let cause = match target {
                        Some(r) if decoded(&r) => None,
                        Some(r) if r.corrupted && !r.faded => Some(DropReason::Collision),
                        _ => Some(DropReason::Fading),
                    };
                    match cause {
                        None => {
                            self.nodes[tx.sender as usize].head_decoded = true;
                            let t = now + self.cfg.mac.sifs;
                            self.sched.schedule(SimTime::from_secs(t), to, Ev::AckSend { to: tx.sender }).expect("sifs is ahead");
                            self.deliver(to, tx.sender, &frame);
                        }
                        Some(c) => self.nodes[tx.sender as usize].head_cause = c,
                    }
                    let h = self.sched.schedule_in(self.cfg.mac.ack_timeout(), tx.sender, Ev::AckTimeout);
                    self.nodes[tx.sender as usize].ack_timer = Some(h);
                }
            },
        }
    }

    fn on_ack(&mut self, node: NodeId, from: NodeId) {
        let n = &mut self.nodes[node as usize];
        let expecting = n.queue.front().is_some_and(|f| f.dest == Dest::Unicast(from));
        let Some(h) = n.ack_timer.filter(|_| expecting) else { return };
        n.ack_timer = None;
        self.sched.cancel(h);
        self.finish_head(node);
    }

    fn on_ack_timeout(&mut self, node: NodeId) {
        let p = self.cfg.mac.clone();
        let n = &mut self.nodes[node as usize];
        n.ack_timer = None;
        if !n.dcf.on_failure(&p) {
            self.stats.retries += 1;
            self.start_service(node);
            return;
        }
        self.stats.link_breaks += 1;
        let head = n.queue.front().expect("awaiting ack for the head").clone();
        let Dest::Unicast(neighbor) = head.dest else { unreachable!("broadcasts are never acknowledged") };
        let stranded = n.queue.extract_behind_head(|f| f.dest == Dest::Unicast(neighbor));
        n.queue.pop_front();
        n.in_service = false;
        if !n.head_decoded {
            let cause = n.head_cause;
            self.drop_packet(head.trace_id, cause, Layer::Mac, node);
        }
        let mut ctx = Ctx::new(self.now(), node, &mut self.rng_routing);
        self.nodes[node as usize].router.on_link_break(&mut ctx, neighbor, None);
        let mut orphans = Vec::new();
        for f in stranded {
            match f.body {
                Body::Data(pkt) => self.nodes[node as usize].router.on_data(&mut ctx, pkt),
                _ => orphans.push(f.trace_id),
            }
        }
        let actions = ctx.actions;
        for id in orphans {
            self.drop_packet(id, DropReason::NoRoute, Layer::Mac, node);
        }
        self.apply(node, actions);
        self.start_service(node);
    }

    /// A decoded frame at `node` from `from`.
    fn deliver(&mut self, node: NodeId, from: NodeId, frame: &Frame) {
        if let Dest::Unicast(to) = frame.dest {
            if to != node {
                return;
            }
            let last = self.nodes[node as usize].last_seq_from.insert(from, frame.seq);
            if last == Some(frame.seq) {
                return;
            }
        }
        match &frame.body {
            Body::Beacon(_) => {
                self.open.remove(&frame.trace_id);
                self.record(TraceEvent::Received, DropReason::None, Layer::App, PacketKind::Pbc, frame.trace_id, None, node, frame.payload);
            }
            Body::Control(msg) => {
                self.open.remove(&frame.trace_id);
                self.record(TraceEvent::Received, DropReason::None, Layer::Routing, PacketKind::Control, frame.trace_id, None, node, frame.payload);
                let mut ctx = Ctx::new(self.now(), node, &mut self.rng_routing);
                self.nodes[node as usize].router.on_control(&mut ctx, from, msg.clone());
                let actions = ctx.actions;
                self.apply(node, actions);
            }
            Body::Data(pkt) => {
                let mut pkt = pkt.clone();
                if pkt.dst == node {
                    self.open.remove(&pkt.id);
                    self.record(TraceEvent::Received, DropReason::None, Layer::App, PacketKind::Cbr, pkt.id, Some(pkt.flow), node, pkt.size);
                    return;
                }
                if let Some(o) = self.open.get_mut(&pkt.id) {
                    o.node = node;
                }
                pkt.ttl = pkt.ttl.saturating_sub(1);
                if pkt.ttl == 0 {
                    self.drop_packet(pkt.id, DropReason::Ttl, Layer::Routing, node);
                    return;
                }
                let mut ctx = Ctx::new(self.now(), node, &mut self.rng_routing);
                self.nodes[node as usize].router.on_data(&mut ctx, pkt);
                let actions = ctx.actions;
                self.apply(node, actions);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tally;
    use crate::routing::Protocol;

    fn quiet(protocol: Protocol, duration: f64) -> NetworkConfig {
        let mut cfg = NetworkConfig { duration, ..Default::default() };
        cfg.routing.protocol = protocol;
        cfg.traffic.beacons = false;
        cfg.traffic.cbr_connections = 0;
        cfg
    }

    fn flow(src: NodeId, dst: NodeId, start: f64, stop: f64) -> CbrFlow {
        CbrFlow { flow_id: 0, src, dst, packet_size: 512, rate: 4.0, start, stop }
    }

    #[test]
    fn one_hop_has_no_forward_records() {
        let links = LinkTable::perfect(2, &[(0, 1)]);
        let net = Network::with_flows(quiet(Protocol::Aodv, 5.0), Topology::Links(links), vec![flow(0, 1, 0.0, 1.0)]).unwrap();
        let out = net.finish();
        let t = tally(&out.trace, PacketKind::Cbr).unwrap();
        assert_eq!((t.sent, t.received), (4, 4));
        assert!(!out.trace.iter().any(|r| r.event == TraceEvent::Forwarded));
    }

    #[test]
    fn three_hop_route_forwards_twice() {
        let links = LinkTable::perfect(4, &[(0, 1), (1, 2), (2, 3)]);
        let mut f = flow(0, 3, 0.0, 0.0);
        f.stop = 0.0;
        let out = Network::with_flows(quiet(Protocol::Aodv, 5.0), Topology::Links(links), vec![f]).unwrap().finish();
        let fwd: Vec<_> = out.trace.iter().filter(|r| r.event == TraceEvent::Forwarded).map(|r| r.node).collect();
        assert_eq!(fwd, vec![1, 2]);
        let t = tally(&out.trace, PacketKind::Cbr).unwrap();
        assert_eq!(t.received, 1);
    }

    #[test]
    fn total_loss_exhausts_retries() {
        let mut links = LinkTable::perfect(2, &[(0, 1)]);
        links.loss = 1.0;
        let mut net = Network::with_flows(quiet(Protocol::Aodv, 1.0), Topology::Links(links), vec![]).unwrap();
        let id = net.originate(PacketKind::Pbc, Layer::App, None, 0, 100);
        let body = Body::Beacon(SafetyBeacon { sender: 0, x: 0.0, y: 0.0, speed: 0.0, heading: 0.0, timestamp: 0.0, emergency: false });
        let frame = net.frame(0, Dest::Unicast(1), 100, id, PacketKind::Pbc, body);
        net.enqueue(0, frame);
        net.run_until(1.0);
        assert_eq!(net.stats().retries, MacParams::default().retry_limit as u64);
        assert_eq!(net.stats().link_breaks, 1);
        let drop = net.trace().iter().find(|r| r.packet_id == id && r.event == TraceEvent::Dropped).unwrap();
        assert_eq!(drop.reason, DropReason::Fading);
    }

    #[test]
    fn ifq_drops_beyond_capacity() {
        let links = LinkTable::perfect(2, &[(0, 1)]);
        let mut net = Network::with_flows(quiet(Protocol::Aodv, 1.0), Topology::Links(links), vec![]).unwrap();
        for _ in 0..51 {
            net.send_beacon(0, false);
        }
        let drops: Vec<_> = net.trace().iter().filter(|r| r.event == TraceEvent::Dropped).collect();
        assert_eq!(drops.len(), 1);
        assert_eq!(drops[0].reason, DropReason::Ifq);
        assert_eq!(net.queue_len(0), 50);
    }

    #[test]
    fn conservation_with_leftovers() {
        let links = LinkTable::perfect(3, &[(0, 1)]);
        let out = Network::with_flows(quiet(Protocol::Aodv, 3.0), Topology::Links(links), vec![flow(0, 2, 0.0, 3.0)]).unwrap().finish();
        let t = tally(&out.trace, PacketKind::Cbr).unwrap();
        assert_eq!(t.received, 0);
        assert!(t.is_conserved());
        assert_eq!(t.sent, t.dropped_total());
        assert!(t.dropped.contains_key(&DropReason::EndOfRun));
    }

    fn beacon_records(trace: &[TraceRecord], event: TraceEvent) -> Vec<&TraceRecord> {
        trace.iter().filter(|r| r.kind == PacketKind::Pbc && r.event == event).collect()
    }

    #[test]
    fn broadcast_reaches_every_neighbor() {
        let links = LinkTable::perfect(4, &[(0, 1), (0, 2), (0, 3)]);
        let mut net = Network::with_flows(quiet(Protocol::Aodv, 1.0), Topology::Links(links), vec![]).unwrap();
        net.send_beacon(0, false);
        let out = net.finish();
        let mut rx: Vec<u32> = beacon_records(&out.trace, TraceEvent::Received).iter().map(|r| r.node).collect();
        rx.sort();
        assert_eq!(rx, [1, 2, 3]);
        assert!(beacon_records(&out.trace, TraceEvent::Dropped).is_empty());
    }

    #[test]
    fn isolated_broadcast_is_never_received() {
        let mut net = Network::with_flows(quiet(Protocol::Aodv, 1.0), Topology::Static(vec![(0.0, 0.0), (5000.0, 0.0)]), vec![]).unwrap();
        net.send_beacon(0, false);
        let out = net.finish();
        assert_eq!(beacon_records(&out.trace, TraceEvent::Sent).len(), 1);
        assert!(beacon_records(&out.trace, TraceEvent::Received).is_empty());
        assert_eq!(out.stats.transmissions, 1);
    }

    #[test]
    fn fixed_backoffs_serialize() {
        let mut links = LinkTable::perfect(2, &[(0, 1)]);
        links.collisions = true;
        let mut net = Network::with_flows(quiet(Protocol::Aodv, 1.0), Topology::Links(links), vec![]).unwrap();
        net.script_backoffs(0, [3]);
        net.script_backoffs(1, [7]);
        net.send_beacon(0, false);
        net.send_beacon(1, false);
        let out = net.finish();
        assert_eq!(out.stats.collisions, 0);
        let p = MacParams::default();
        let dur = p.frame_duration(200);
        let first = p.difs() + 3.0 * p.slot + dur;
        // The loser froze with 4 slots left and resumes after a fresh DIFS.
        let second = first + p.difs() + 4.0 * p.slot + dur;
        let rx = beacon_records(&out.trace, TraceEvent::Received);
        assert_eq!(rx.len(), 2);
        assert_eq!((rx[0].node, rx[0].time_ns), (1, quantize(first)));
        assert_eq!((rx[1].node, rx[1].time_ns), (0, quantize(second)));
    }

    #[test]
    fn one_hop_delay_matches_slot_arithmetic() {
        let links = LinkTable::perfect(2, &[(0, 1)]);
        let f = flow(0, 1, 0.0, 0.5);
        let mut net = Network::with_flows(quiet(Protocol::Aodv, 2.0), Topology::Links(links), vec![f]).unwrap();
        net.script_backoffs(0, [0; 16]);
        let out = net.finish();
        let p = MacParams::default();
        let rx: Vec<_> = out.trace.iter().filter(|r| r.kind == PacketKind::Cbr && r.event == TraceEvent::Received).collect();
        assert_eq!(rx.len(), 2);
        // The route exists by the second packet, so it only waits DIFS and its airtime.
        assert_eq!(rx[1].time_ns, quantize(0.25 + p.difs() + p.frame_duration(512)));
    }

    #[test]
    fn beacon_reception_at_calibrated_range_matches_fading_oracle() {
        // Q(0.75, 0.75), the regularized upper incomplete gamma function.
        const ORACLE: f64 = 0.348_407;
        let mut cfg = quiet(Protocol::Aodv, 400.0);
        cfg.seed = 11;
        let mut net = Network::with_flows(cfg, Topology::Static(vec![(0.0, 0.0), (250.0, 0.0)]), vec![]).unwrap();
        let n = 3000;
        for k in 0..n {
            net.run_until(k as f64 * 0.1);
            net.send_beacon(0, false);
        }
        let out = net.finish();
        let ratio = beacon_records(&out.trace, TraceEvent::Received).len() as f64 / n as f64;
        assert!((ratio - ORACLE).abs() < 0.04, "{ratio}");
    }
}
