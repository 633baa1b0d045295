//! Optimized Link State Routing.
//!
//! HELLO messages sense links and two-hop neighbours and announce MPR
//! choices. Nodes selected as MPR by someone originate TC messages listing
//! their selectors; TCs are relayed only by MPRs of the previous hop. Routes
//! are shortest paths over the union of neighbour, two-hop and topology sets.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{ControlMsg, Ctx, DataPacket, Dest, NodeId, RouteInfo, RouterTimer};
use crate::trace::DropReason;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OlsrParams {
    pub hello_interval: f64,
    pub tc_interval: f64,
    /// Hold times are this multiple of the emission interval.
    pub hold_factor: f64,
    pub tc_ttl: u32,
}

impl Default for OlsrParams {
    fn default() -> Self {
        OlsrParams { hello_interval: 2.0, tc_interval: 5.0, hold_factor: 3.0, tc_ttl: 255 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LinkCode {
    Asym,
    Sym,
    Mpr,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Msg {
    Hello { neighbors: Vec<(NodeId, LinkCode)> },
    Tc { origin: NodeId, msg_seq: u32, ansn: u32, selectors: Vec<NodeId>, ttl: u32 },
}

impl Msg {
    pub fn size(&self) -> u32 {
        match self {
            Msg::Hello { neighbors } => 16 + 4 * neighbors.len() as u32,
            Msg::Tc { selectors, .. } => 16 + 4 * selectors.len() as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Timer {
    Hello,
    Tc,
}

/// Greedy MPR selection. `coverage` maps each symmetric neighbour to the
/// strict two-hop neighbours it reaches.
pub fn select_mprs(coverage: &BTreeMap<NodeId, BTreeSet<NodeId>>) -> BTreeSet<NodeId> {
    let mut reach: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for (&n, two) in coverage {
        for &t in two {
            reach.entry(t).or_default().push(n);
        }
    }
    let mut mprs: BTreeSet<NodeId> = reach.values().filter(|v| v.len() == 1).map(|v| v[0]).collect();
    let mut uncovered: BTreeSet<NodeId> = reach
        .keys()
        .copied()
        .filter(|t| !mprs.iter().any(|m| coverage[m].contains(t)))
        .collect();
    while !uncovered.is_empty() {
        let (best, _) = coverage
            .iter()
            .filter(|(n, _)| !mprs.contains(n))
            .map(|(&n, two)| (n, two.intersection(&uncovered).count()))
            .max_by_key(|&(n, c)| (c, std::cmp::Reverse(n)))
            .expect("every uncovered node has a covering neighbour");
        for t in &coverage[&best] {
            uncovered.remove(t);
        }
        mprs.insert(best);
    }
    mprs
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Link {
    heard_until: f64,
    sym_until: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Topology {
    ansn: u32,
    selectors: BTreeSet<NodeId>,
    expires: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OlsrStats {
    pub hellos: u64,
    pub tcs_originated: u64,
    pub tcs_forwarded: u64,
}

#[derive(Debug, Clone)]
pub struct Olsr {
    me: NodeId,
    p: OlsrParams,
    links: BTreeMap<NodeId, Link>,
    two_hop: BTreeMap<NodeId, (BTreeSet<NodeId>, f64)>,
    mprs: BTreeSet<NodeId>,
    selectors: BTreeMap<NodeId, f64>,
    topology: BTreeMap<NodeId, Topology>,
    seen: HashMap<NodeId, u32>,
    msg_seq: u32,
    ansn: u32,
    routes: BTreeMap<NodeId, RouteInfo>,
    stats: OlsrStats,
}

fn wrap(m: Msg) -> ControlMsg {
    ControlMsg::Olsr(m)
}

impl Olsr {
    pub fn new(me: NodeId, p: OlsrParams) -> Self {
        Olsr {
            me,
            p,
            links: BTreeMap::new(),
            two_hop: BTreeMap::new(),
            mprs: BTreeSet::new(),
            selectors: BTreeMap::new(),
            topology: BTreeMap::new(),
            seen: HashMap::new(),
            msg_seq: 0,
            ansn: 0,
            routes: BTreeMap::new(),
            stats: OlsrStats::default(),
        }
    }

    pub fn stats(&self) -> &OlsrStats {
        &self.stats
    }

    pub fn mprs(&self) -> &BTreeSet<NodeId> {
        &self.mprs
    }

    pub fn mpr_selectors(&self) -> BTreeSet<NodeId> {
        self.selectors.keys().copied().collect()
    }

    pub fn route(&self, dest: NodeId) -> Option<RouteInfo> {
        self.routes.get(&dest).copied()
    }

    pub fn sym_neighbors(&self, now: f64) -> BTreeSet<NodeId> {
        self.links.iter().filter(|(_, l)| l.sym_until > now).map(|(&n, _)| n).collect()
    }

    /// Strict two-hop neighbours: reachable via a symmetric neighbour, not
    /// ourselves and not a symmetric neighbour.
    pub fn strict_two_hop(&self, now: f64) -> BTreeSet<NodeId> {
        self.coverage(now).into_values().flatten().collect()
    }

    fn coverage(&self, now: f64) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
        let sym = self.sym_neighbors(now);
        sym.iter()
            .map(|&n| {
                let two = self
                    .two_hop
                    .get(&n)
                    .filter(|(_, exp)| *exp > now)
                    .map(|(s, _)| s.iter().copied().filter(|t| *t != self.me && !sym.contains(t)).collect())
                    .unwrap_or_default();
                (n, two)
            })
            .collect()
    }

    fn hold(&self, interval: f64) -> f64 {
        interval * self.p.hold_factor
    }

    fn jittered(&self, ctx: &mut Ctx, interval: f64) -> f64 {
        interval - ctx.rng.uniform(0.0, interval / 4.0)
    }

    pub fn start(&mut self, ctx: &mut Ctx) {
        let h = ctx.rng.uniform(0.0, self.p.hello_interval / 4.0);
        ctx.timer(h, RouterTimer::Olsr(Timer::Hello));
        let t = self.jittered(ctx, self.p.tc_interval);
        ctx.timer(t, RouterTimer::Olsr(Timer::Tc));
    }

    fn purge(&mut self, now: f64) {
        self.links.retain(|_, l| l.heard_until > now || l.sym_until > now);
        self.two_hop.retain(|_, (_, exp)| *exp > now);
        let sym = self.sym_neighbors(now);
        self.selectors.retain(|n, exp| *exp > now && sym.contains(n));
        self.topology.retain(|_, t| t.expires > now);
    }

    /// Recomputes MPRs, selector-set version and routes after any change.
    fn recompute(&mut self, now: f64) {
        self.purge(now);
        self.mprs = select_mprs(&self.coverage(now));
        self.routes = self.shortest_paths(now);
    }

    fn shortest_paths(&self, now: f64) -> BTreeMap<NodeId, RouteInfo> {
        let sym = self.sym_neighbors(now);
        let mut adj: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
        for &n in &sym {
            if let Some((two, _)) = self.two_hop.get(&n) {
                adj.entry(n).or_default().extend(two.iter().copied());
            }
        }
        for (&origin, t) in &self.topology {
            adj.entry(origin).or_default().extend(t.selectors.iter().copied());
        }
        let mut routes = BTreeMap::new();
        let mut queue = VecDeque::new();
        for &n in &sym {
            routes.insert(n, RouteInfo { next_hop: n, hops: 1 });
            queue.push_back(n);
        }
        while let Some(u) = queue.pop_front() {
            let via = routes[&u];
            for &v in adj.get(&u).into_iter().flatten() {
                if v != self.me && !routes.contains_key(&v) {
                    routes.insert(v, RouteInfo { next_hop: via.next_hop, hops: via.hops + 1 });
                    queue.push_back(v);
                }
            }
        }
        routes
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        self.recompute(ctx.now);
        match timer {
            Timer::Hello => {
                let neighbors = self
                    .links
                    .iter()
                    .map(|(&n, l)| {
                        let code = if l.sym_until <= ctx.now {
                            LinkCode::Asym
                        } else if self.mprs.contains(&n) {
                            LinkCode::Mpr
                        } else {
                            LinkCode::Sym
                        };
                        (n, code)
                    })
                    .collect();
                self.stats.hellos += 1;
                ctx.control(wrap(Msg::Hello { neighbors }), Dest::Broadcast);
                let next = self.jittered(ctx, self.p.hello_interval);
                ctx.timer(next, RouterTimer::Olsr(Timer::Hello));
            }
            Timer::Tc => {
                if !self.selectors.is_empty() {
                    self.msg_seq += 1;
                    self.stats.tcs_originated += 1;
                    let tc = Msg::Tc {
                        origin: self.me,
                        msg_seq: self.msg_seq,
                        ansn: self.ansn,
                        selectors: self.selectors.keys().copied().collect(),
                        ttl: self.p.tc_ttl,
                    };
                    ctx.control(wrap(tc), Dest::Broadcast);
                }
                let next = self.jittered(ctx, self.p.tc_interval);
                ctx.timer(next, RouterTimer::Olsr(Timer::Tc));
            }
        }
    }

    pub fn on_control(&mut self, ctx: &mut Ctx, from: NodeId, msg: Msg) {
        let now = ctx.now;
        match msg {
            Msg::Hello { neighbors } => {
                let hold = self.hold(self.p.hello_interval);
                let link = self.links.entry(from).or_insert(Link { heard_until: 0.0, sym_until: 0.0 });
                link.heard_until = now + hold;
                let mine = neighbors.iter().find(|(n, _)| *n == self.me).map(|&(_, c)| c);
                if mine.is_some() {
                    link.sym_until = now + hold;
                }
                if link.sym_until > now {
                    let two = neighbors
                        .iter()
                        .filter(|&&(n, c)| c != LinkCode::Asym && n != self.me)
                        .map(|&(n, _)| n)
                        .collect();
                    self.two_hop.insert(from, (two, now + hold));
                }
                let before = self.mpr_selectors();
                if mine == Some(LinkCode::Mpr) {
                    self.selectors.insert(from, now + hold);
                } else {
                    self.selectors.remove(&from);
                }
                self.recompute(now);
                if self.mpr_selectors() != before {
                    self.ansn += 1;
                }
            }
            Msg::Tc { origin, msg_seq, ansn, selectors, ttl } => {
                if origin == self.me || !self.sym_neighbors(now).contains(&from) {
                    return;
                }
                if self.seen.get(&origin).is_some_and(|&s| s >= msg_seq) {
                    return;
                }
                self.seen.insert(origin, msg_seq);
                let fresh = self.topology.get(&origin).is_none_or(|t| ansn >= t.ansn);
                if fresh {
                    let expires = now + self.hold(self.p.tc_interval);
                    self.topology.insert(origin, Topology { ansn, selectors: selectors.iter().copied().collect(), expires });
                    self.recompute(now);
                }
                if ttl > 1 && self.selectors.contains_key(&from) {
                    self.stats.tcs_forwarded += 1;
                    ctx.control(wrap(Msg::Tc { origin, msg_seq, ansn, selectors, ttl: ttl - 1 }), Dest::Broadcast);
                }
            }
        }
    }

    pub fn on_data(&mut self, ctx: &mut Ctx, pkt: DataPacket) {
        match self.route(pkt.dst) {
            Some(r) => ctx.send_data(pkt, r.next_hop),
            None => ctx.drop_data(pkt, DropReason::NoRoute),
        }
    }

    pub fn on_link_break(&mut self, ctx: &mut Ctx, neighbor: NodeId, pkt: Option<DataPacket>) {
        self.links.remove(&neighbor);
        self.two_hop.remove(&neighbor);
        if self.selectors.remove(&neighbor).is_some() {
            self.ansn += 1;
        }
        self.recompute(ctx.now);
        if let Some(pkt) = pkt {
            self.on_data(ctx, pkt);
        }
    }
}
