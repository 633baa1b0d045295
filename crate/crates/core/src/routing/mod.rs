//! Node-level routing: AODV, AOMDV, DSDV and OLSR behind one dispatch type.
//!
//! Protocols never touch the network directly. Every reaction is pushed as an
//! [`Action`] into the caller's [`Ctx`], which the network then executes.

pub mod aodv;
pub mod aomdv;
pub mod dsdv;
pub mod olsr;
pub mod testnet;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::sim::RngStream;
use crate::trace::DropReason;

pub type NodeId = u32;

/// Hop metric used for unreachable destinations.
pub const INFINITE_METRIC: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct DataPacket {
    pub id: u64,
    pub flow: u32,
    pub src: NodeId,
    pub dst: NodeId,
    /// Payload bytes.
    pub size: u32,
    pub ttl: u8,
    pub seq: u32,
    pub created: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dest {
    Broadcast,
    Unicast(NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlMsg {
    Aodv(aodv::Msg),
    Aomdv(aomdv::Msg),
    Dsdv(dsdv::Msg),
    Olsr(olsr::Msg),
}

impl ControlMsg {
    /// Routing payload in bytes.
    pub fn size(&self) -> u32 {
        match self {
            ControlMsg::Aodv(m) => m.size(),
            ControlMsg::Aomdv(m) => m.size(),
            ControlMsg::Dsdv(m) => m.size(),
            ControlMsg::Olsr(m) => m.size(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RouterTimer {
    Aodv(aodv::Timer),
    Aomdv(aomdv::Timer),
    Dsdv(dsdv::Timer),
    Olsr(olsr::Timer),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    SendData { pkt: DataPacket, next_hop: NodeId },
    DropData { pkt: DataPacket, reason: DropReason },
    SendControl { msg: ControlMsg, to: Dest },
    Timer { delay: f64, timer: RouterTimer },
}

pub struct Ctx<'a> {
    pub now: f64,
    pub me: NodeId,
    pub rng: &'a mut RngStream,
    pub actions: Vec<Action>,
}

impl<'a> Ctx<'a> {
    pub fn new(now: f64, me: NodeId, rng: &'a mut RngStream) -> Self {
        Ctx { now, me, rng, actions: Vec::new() }
    }

    pub fn send_data(&mut self, pkt: DataPacket, next_hop: NodeId) {
        self.actions.push(Action::SendData { pkt, next_hop });
    }

    pub fn drop_data(&mut self, pkt: DataPacket, reason: DropReason) {
        self.actions.push(Action::DropData { pkt, reason });
    }

    pub fn control(&mut self, msg: ControlMsg, to: Dest) {
        self.actions.push(Action::SendControl { msg, to });
    }

    pub fn timer(&mut self, delay: f64, timer: RouterTimer) {
        self.actions.push(Action::Timer { delay, timer });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Aodv,
    Aomdv,
    Dsdv,
    Olsr,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Aodv, Protocol::Aomdv, Protocol::Dsdv, Protocol::Olsr];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Aodv => "aodv",
            Protocol::Aomdv => "aomdv",
            Protocol::Dsdv => "dsdv",
            Protocol::Olsr => "olsr",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown protocol `{s}` (valid: aodv, aomdv, dsdv, olsr)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    pub protocol: Protocol,
    pub aodv: aodv::AodvParams,
    pub aomdv: aomdv::AomdvParams,
    pub dsdv: dsdv::DsdvParams,
    pub olsr: olsr::OlsrParams,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            protocol: Protocol::Aodv,
            aodv: Default::default(),
            aomdv: Default::default(),
            dsdv: Default::default(),
            olsr: Default::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteInfo {
    pub next_hop: NodeId,
    pub hops: u32,
}

#[derive(Debug, Clone)]
pub enum Router {
    Aodv(aodv::Aodv),
    Aomdv(aomdv::Aomdv),
    Dsdv(dsdv::Dsdv),
    Olsr(olsr::Olsr),
}

impl Router {
    pub fn new(cfg: &RoutingConfig, me: NodeId) -> Self {
        match cfg.protocol {
            Protocol::Aodv => Router::Aodv(aodv::Aodv::new(me, cfg.aodv.clone())),
            Protocol::Aomdv => Router::Aomdv(aomdv::Aomdv::new(me, cfg.aomdv.clone())),
            Protocol::Dsdv => Router::Dsdv(dsdv::Dsdv::new(me, cfg.dsdv.clone())),
            Protocol::Olsr => Router::Olsr(olsr::Olsr::new(me, cfg.olsr.clone())),
        }
    }

    pub fn protocol(&self) -> Protocol {
        match self {
            Router::Aodv(_) => Protocol::Aodv,
            Router::Aomdv(_) => Protocol::Aomdv,
            Router::Dsdv(_) => Protocol::Dsdv,
            Router::Olsr(_) => Protocol::Olsr,
        }
    }

    pub fn start(&mut self, ctx: &mut Ctx) {
        match self {
            Router::Aodv(_) | Router::Aomdv(_) => {}
            Router::Dsdv(r) => r.start(ctx),
            Router::Olsr(r) => r.start(ctx),
        }
    }

    /// A data packet originated here or arrived for forwarding.
    pub fn on_data(&mut self, ctx: &mut Ctx, pkt: DataPacket) {
        match self {
            Router::Aodv(r) => r.on_data(ctx, pkt),
            Router::Aomdv(r) => r.on_data(ctx, pkt),
            Router::Dsdv(r) => r.on_data(ctx, pkt),
            Router::Olsr(r) => r.on_data(ctx, pkt),
        }
    }

    pub fn on_control(&mut self, ctx: &mut Ctx, from: NodeId, msg: ControlMsg) {
        match (self, msg) {
            (Router::Aodv(r), ControlMsg::Aodv(m)) => r.on_control(ctx, from, m),
            (Router::Aomdv(r), ControlMsg::Aomdv(m)) => r.on_control(ctx, from, m),
            (Router::Dsdv(r), ControlMsg::Dsdv(m)) => r.on_control(ctx, from, m),
            (Router::Olsr(r), ControlMsg::Olsr(m)) => r.on_control(ctx, from, m),
            (r, m) => panic!("{} router received foreign message {m:?}", r.protocol()),
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: RouterTimer) {
        match (self, timer) {
            (Router::Aodv(r), RouterTimer::Aodv(t)) => r.on_timer(ctx, t),
            (Router::Aomdv(r), RouterTimer::Aomdv(t)) => r.on_timer(ctx, t),
            (Router::Dsdv(r), RouterTimer::Dsdv(t)) => r.on_timer(ctx, t),
            (Router::Olsr(r), RouterTimer::Olsr(t)) => r.on_timer(ctx, t),
            (r, t) => panic!("{} router received foreign timer {t:?}", r.protocol()),
        }
    }

    /// The MAC gave up on `neighbor`; `pkt` is the data packet it was carrying, if any.
    pub fn on_link_break(&mut self, ctx: &mut Ctx, neighbor: NodeId, pkt: Option<DataPacket>) {
        match self {
            Router::Aodv(r) => r.on_link_break(ctx, neighbor, pkt),
            Router::Aomdv(r) => r.on_link_break(ctx, neighbor, pkt),
            Router::Dsdv(r) => r.on_link_break(ctx, neighbor, pkt),
            Router::Olsr(r) => r.on_link_break(ctx, neighbor, pkt),
        }
    }

    /// Best route usable for data at `now`.
    pub fn route(&self, dest: NodeId, now: f64) -> Option<RouteInfo> {
        match self {
            Router::Aodv(r) => r.route(dest, now),
            Router::Aomdv(r) => r.route(dest, now),
            Router::Dsdv(r) => r.route(dest),
            Router::Olsr(r) => r.route(dest),
        }
    }
}
