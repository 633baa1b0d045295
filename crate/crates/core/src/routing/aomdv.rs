//! Ad hoc On-demand Multipath Distance Vector routing.
//!
//! Every destination keeps up to `max_paths` paths with pairwise distinct
//! next hops and last hops. Loop freedom follows the advertised-hop-count
//! rule: a path is accepted only from a neighbour whose advertised hop count
//! is strictly below this node's own advertised hop count for the same
//! destination sequence number. Replies carry the node list of their path so
//! the originator can keep its path set link-disjoint.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::aodv::AodvParams;
use super::{ControlMsg, Ctx, DataPacket, Dest, NodeId, RouteInfo, RouterTimer};
use crate::trace::DropReason;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AomdvParams {
    pub max_paths: usize,
    #[serde(flatten)]
    pub base: AodvParams,
}

impl Default for AomdvParams {
    fn default() -> Self {
        AomdvParams { max_paths: 3, base: AodvParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rreq {
    pub id: u32,
    pub origin: NodeId,
    pub origin_seq: u32,
    pub dest: NodeId,
    pub dest_seq: Option<u32>,
    pub hops: u32,
    pub ttl: u32,
    /// Neighbour of the originator on this copy's path.
    pub first_hop: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rrep {
    pub origin: NodeId,
    pub dest: NodeId,
    pub dest_seq: u32,
    pub hops: u32,
    pub advertised: u32,
    /// Neighbour of the destination on this path.
    pub last_hop: Option<NodeId>,
    /// Nodes from the sender to the destination, inclusive.
    pub route: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Msg {
    Rreq(Rreq),
    Rrep(Rrep),
    Rerr { unreachable: Vec<(NodeId, u32)> },
}

impl Msg {
    pub fn size(&self) -> u32 {
        match self {
            Msg::Rreq(_) => 28,
            Msg::Rrep(r) => 24 + 4 * r.route.len() as u32,
            Msg::Rerr { unreachable } => 4 + 8 * unreachable.len() as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Timer {
    Discovery { dest: NodeId, attempt: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub next_hop: NodeId,
    pub last_hop: NodeId,
    pub hops: u32,
    /// Advertised hop count of the neighbour this path was learned from.
    pub via_advertised: u32,
    pub expires: f64,
    /// Nodes from `next_hop` to the destination; empty for reverse paths.
    pub route: Vec<NodeId>,
}

impl Path {
    fn links(&self, me: NodeId) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        std::iter::once(me)
            .chain(self.route.iter().copied())
            .zip(self.route.iter().copied())
            .map(|(a, b)| (a.min(b), a.max(b)))
    }

    fn shares_link_with(&self, other: &Path, me: NodeId) -> bool {
        if self.route.is_empty() || other.route.is_empty() {
            return false;
        }
        let mine: HashSet<_> = self.links(me).collect();
        other.links(me).any(|l| mine.contains(&l))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Entry {
    pub seq: Option<u32>,
    pub advertised: Option<u32>,
    pub paths: Vec<Path>,
    pub precursors: BTreeSet<NodeId>,
}

impl Entry {
    fn live(&self, now: f64) -> impl Iterator<Item = &Path> {
        self.paths.iter().filter(move |p| p.expires > now)
    }

    pub fn best(&self, now: f64) -> Option<&Path> {
        self.live(now).min_by_key(|p| (p.hops, p.next_hop))
    }

    fn max_hops(&self) -> u32 {
        self.paths.iter().map(|p| p.hops).max().unwrap_or(0)
    }

    /// Inserts `cand` if it keeps the set disjoint, replacing strictly longer
    /// conflicting paths. Returns whether an equivalent path is now installed.
    fn try_add(&mut self, cand: Path, max_paths: usize, me: NodeId) -> bool {
        if self.advertised.is_some_and(|a| cand.via_advertised >= a || cand.hops > a) {
            return false;
        }
        let conflicts: Vec<usize> = self
            .paths
            .iter()
            .enumerate()
            .filter(|(_, p)| p.next_hop == cand.next_hop || p.last_hop == cand.last_hop || p.shares_link_with(&cand, me))
            .map(|(i, _)| i)
            .collect();
        if conflicts.is_empty() {
            if self.paths.len() < max_paths {
                self.paths.push(cand);
                return true;
            }
            let (worst, worst_hops) = self
                .paths
                .iter()
                .enumerate()
                .map(|(i, p)| (i, p.hops))
                .max_by_key(|&(i, h)| (h, std::cmp::Reverse(i)))
                .expect("full set is non-empty");
            if cand.hops < worst_hops {
                self.paths[worst] = cand;
                return true;
            }
            return false;
        }
        let min_conflict = conflicts.iter().map(|&i| self.paths[i].hops).min().expect("non-empty");
        if cand.hops < min_conflict {
            for &i in conflicts.iter().rev() {
                self.paths.remove(i);
            }
            self.paths.push(cand);
            return true;
        }
        // Same neighbour and length: the path is already installed, just keep it alive.
        match self.paths.iter_mut().find(|p| p.next_hop == cand.next_hop && p.hops == cand.hops) {
            Some(p) => {
                p.expires = p.expires.max(cand.expires);
                true
            }
            None => false,
        }
    }

    /// Lowers the advertised hop count and drops paths that no longer satisfy it.
    fn advertise(&mut self, hops: u32) -> u32 {
        let a = match self.advertised {
            None => self.max_hops().max(hops),
            Some(a) => a.min(hops.max(1)),
        };
        self.advertised = Some(a);
        self.paths.retain(|p| p.via_advertised < a && p.hops <= a);
        a
    }
}

#[derive(Debug, Clone)]
struct Pending {
    attempt: u32,
    buffer: VecDeque<(DataPacket, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AomdvStats {
    pub rreq_originated: u64,
    pub rrep_sent: u64,
    pub rerr_sent: u64,
    /// Link breaks absorbed by an alternate path.
    pub failovers: u64,
}

#[derive(Debug, Clone)]
pub struct Aomdv {
    me: NodeId,
    p: AomdvParams,
    seq: u32,
    rreq_id: u32,
    table: BTreeMap<NodeId, Entry>,
    seen: HashMap<(NodeId, u32), u32>,
    /// Destination-side: `(neighbour, first hop)` pairs already answered per request.
    replied: HashMap<(NodeId, u32), Vec<(NodeId, NodeId)>>,
    /// Intermediate-side: reverse next hops used per `(origin, dest, seq)` and the best hop count forwarded.
    rrep_used: HashMap<(NodeId, NodeId, u32), (HashSet<NodeId>, u32)>,
    pending: BTreeMap<NodeId, Pending>,
    stats: AomdvStats,
}

fn wrap(m: Msg) -> ControlMsg {
    ControlMsg::Aomdv(m)
}

impl Aomdv {
    pub fn new(me: NodeId, p: AomdvParams) -> Self {
        Aomdv {
            me,
            p,
            seq: 0,
            rreq_id: 0,
            table: BTreeMap::new(),
            seen: HashMap::new(),
            replied: HashMap::new(),
            rrep_used: HashMap::new(),
            pending: BTreeMap::new(),
            stats: AomdvStats::default(),
        }
    }

    pub fn stats(&self) -> &AomdvStats {
        &self.stats
    }

    pub fn entry(&self, dest: NodeId) -> Option<&Entry> {
        self.table.get(&dest)
    }

    /// Live paths to `dest`, shortest first.
    pub fn paths(&self, dest: NodeId, now: f64) -> Vec<&Path> {
        let mut v: Vec<&Path> = self.table.get(&dest).map(|e| e.live(now).collect()).unwrap_or_default();
        v.sort_by_key(|p| (p.hops, p.next_hop));
        v
    }

    pub fn route(&self, dest: NodeId, now: f64) -> Option<RouteInfo> {
        self.table
            .get(&dest)
            .and_then(|e| e.best(now))
            .map(|p| RouteInfo { next_hop: p.next_hop, hops: p.hops })
    }

    fn timeout(&self, now: f64) -> f64 {
        now + self.p.base.active_route_timeout
    }

    /// Keeps every path of `dest` alive; alternates have no other liveness signal.
    fn refresh(&mut self, dest: NodeId, now: f64) {
        let t = self.timeout(now);
        if let Some(e) = self.table.get_mut(&dest) {
            for p in e.paths.iter_mut().filter(|p| p.expires > now) {
                p.expires = p.expires.max(t);
            }
        }
    }

    fn touch_neighbor(&mut self, nb: NodeId, now: f64) {
        let expires = self.timeout(now);
        let me = self.me;
        let e = self.table.entry(nb).or_default();
        if let Some(p) = e.paths.iter_mut().find(|p| p.next_hop == nb && p.hops == 1) {
            p.expires = p.expires.max(expires);
            return;
        }
        // A direct link always wins over multi-hop paths to the neighbour itself.
        e.paths.retain(|p| p.next_hop != nb && p.last_hop != me);
        e.paths.insert(0, Path { next_hop: nb, last_hop: me, hops: 1, via_advertised: 0, expires, route: vec![nb] });
        e.paths.truncate(self.p.max_paths);
    }

    /// Applies sequence-number freshness; true if paths at `seq` may be added.
    fn admit_seq(&mut self, dest: NodeId, seq: u32) -> bool {
        let e = self.table.entry(dest).or_default();
        match e.seq {
            Some(s) if s > seq => false,
            Some(s) if s == seq => true,
            _ => {
                e.seq = Some(seq);
                e.advertised = None;
                e.paths.clear();
                true
            }
        }
    }

    pub fn on_data(&mut self, ctx: &mut Ctx, pkt: DataPacket) {
        if let Some(next) = self.route(pkt.dst, ctx.now).map(|r| r.next_hop) {
            self.refresh(pkt.dst, ctx.now);
            self.refresh(pkt.src, ctx.now);
            ctx.send_data(pkt, next);
        } else if pkt.src == self.me {
            self.buffer(ctx, pkt);
        } else {
            if let Some(seq) = self.table.get(&pkt.dst).and_then(|e| e.seq) {
                self.stats.rerr_sent += 1;
                ctx.control(wrap(Msg::Rerr { unreachable: vec![(pkt.dst, seq)] }), Dest::Broadcast);
            }
            ctx.drop_data(pkt, DropReason::NoRoute);
        }
    }

    fn buffer(&mut self, ctx: &mut Ctx, pkt: DataPacket) {
        let dest = pkt.dst;
        let start = !self.pending.contains_key(&dest);
        let pending = self.pending.entry(dest).or_insert(Pending { attempt: 0, buffer: VecDeque::new() });
        if pending.buffer.len() >= self.p.base.buffer_capacity {
            let (old, _) = pending.buffer.pop_front().expect("full buffer is non-empty");
            ctx.drop_data(old, DropReason::NoRoute);
        }
        pending.buffer.push_back((pkt, ctx.now));
        if start {
            self.send_rreq(ctx, dest, 0);
        }
    }

    fn send_rreq(&mut self, ctx: &mut Ctx, dest: NodeId, attempt: u32) {
        self.seq += 1;
        self.rreq_id += 1;
        self.seen.insert((self.me, self.rreq_id), 0);
        self.stats.rreq_originated += 1;
        let rreq = Rreq {
            id: self.rreq_id,
            origin: self.me,
            origin_seq: self.seq,
            dest,
            dest_seq: self.table.get(&dest).and_then(|e| e.seq),
            hops: 0,
            ttl: self.p.base.ttl(attempt),
            first_hop: None,
        };
        ctx.control(wrap(Msg::Rreq(rreq)), Dest::Broadcast);
        ctx.timer(self.p.base.wait(attempt), RouterTimer::Aomdv(Timer::Discovery { dest, attempt }));
    }

    fn flush(&mut self, ctx: &mut Ctx, dest: NodeId) {
        let Some(pending) = self.pending.remove(&dest) else { return };
        for (pkt, queued) in pending.buffer {
            if ctx.now - queued > self.p.base.buffer_timeout {
                ctx.drop_data(pkt, DropReason::NoRoute);
            } else {
                self.on_data(ctx, pkt);
            }
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        let Timer::Discovery { dest, attempt } = timer;
        match self.pending.get(&dest) {
            Some(p) if p.attempt == attempt => {}
            _ => return,
        }
        if self.route(dest, ctx.now).is_some() {
            self.flush(ctx, dest);
            return;
        }
        let next = attempt + 1;
        let timeout = self.p.base.buffer_timeout;
        let pending = self.pending.get_mut(&dest).expect("checked above");
        while pending.buffer.front().is_some_and(|(_, q)| ctx.now - q > timeout) {
            let (pkt, _) = pending.buffer.pop_front().expect("non-empty");
            ctx.drop_data(pkt, DropReason::NoRoute);
        }
        if next >= self.p.base.attempts() || pending.buffer.is_empty() {
            for (pkt, _) in self.pending.remove(&dest).expect("checked above").buffer {
                ctx.drop_data(pkt, DropReason::NoRoute);
            }
            return;
        }
        pending.attempt = next;
        self.send_rreq(ctx, dest, next);
    }

    pub fn on_control(&mut self, ctx: &mut Ctx, from: NodeId, msg: Msg) {
        self.touch_neighbor(from, ctx.now);
        match msg {
            Msg::Rreq(r) => self.on_rreq(ctx, from, r),
            Msg::Rrep(r) => self.on_rrep(ctx, from, r),
            Msg::Rerr { unreachable } => self.on_rerr(ctx, from, unreachable),
        }
    }

    fn on_rreq(&mut self, ctx: &mut Ctx, from: NodeId, r: Rreq) {
        if r.origin == self.me {
            return;
        }
        let hops = r.hops + 1;
        let first_hop = r.first_hop.unwrap_or(self.me);
        let key = (r.origin, r.id);
        let (first, improving) = match self.seen.get(&key) {
            None => (true, false),
            Some(&best) => (false, hops < best),
        };
        if first || improving {
            self.seen.insert(key, hops);
        }
        if r.origin != from && self.admit_seq(r.origin, r.origin_seq) {
            let cand = Path {
                next_hop: from,
                last_hop: first_hop,
                hops,
                via_advertised: r.hops,
                expires: self.timeout(ctx.now),
                route: Vec::new(),
            };
            let (max, me) = (self.p.max_paths, self.me);
            self.table.get_mut(&r.origin).expect("admitted").try_add(cand, max, me);
        } else if r.origin == from {
            let e = self.table.entry(r.origin).or_default();
            e.seq = Some(e.seq.map_or(r.origin_seq, |s| s.max(r.origin_seq)));
        }

        if r.dest == self.me {
            let answered = self.replied.entry(key).or_default();
            let disjoint = answered.iter().all(|&(n, f)| n != from && f != first_hop);
            if improving || first || (disjoint && answered.len() < self.p.max_paths) {
                answered.push((from, first_hop));
                if let Some(s) = r.dest_seq {
                    self.seq = self.seq.max(s);
                }
                self.stats.rrep_sent += 1;
                let rrep = Rrep {
                    origin: r.origin,
                    dest: self.me,
                    dest_seq: self.seq,
                    hops: 0,
                    advertised: 0,
                    last_hop: None,
                    route: vec![self.me],
                };
                ctx.control(wrap(Msg::Rrep(rrep)), Dest::Unicast(from));
            }
            return;
        }
        if (first || improving) && r.ttl > 1 {
            if let Some(e) = self.table.get_mut(&r.origin) {
                e.advertise(hops);
            }
            let fwd = Rreq { hops, ttl: r.ttl - 1, first_hop: Some(first_hop), ..r };
            ctx.control(wrap(Msg::Rreq(fwd)), Dest::Broadcast);
        }
    }

    fn on_rrep(&mut self, ctx: &mut Ctx, from: NodeId, r: Rrep) {
        if r.dest == self.me || r.route.contains(&self.me) {
            return;
        }
        let hops = r.hops + 1;
        let added = self.admit_seq(r.dest, r.dest_seq) && {
            let cand = Path {
                next_hop: from,
                last_hop: r.last_hop.unwrap_or(self.me),
                hops,
                via_advertised: r.advertised,
                expires: self.timeout(ctx.now),
                route: r.route.clone(),
            };
            let (max, me) = (self.p.max_paths, self.me);
            self.table.get_mut(&r.dest).expect("admitted").try_add(cand, max, me)
        };
        if !added {
            return;
        }
        if r.origin == self.me {
            self.flush(ctx, r.dest);
            return;
        }
        let key = (r.origin, r.dest, r.dest_seq);
        let reverse: Vec<NodeId> = self
            .table
            .get(&r.origin)
            .map(|e| {
                let mut ps: Vec<&Path> = e.live(ctx.now).collect();
                ps.sort_by_key(|p| (p.hops, p.next_hop));
                ps.iter().map(|p| p.next_hop).collect()
            })
            .unwrap_or_default();
        let (used, best) = self.rrep_used.entry(key).or_insert((HashSet::new(), u32::MAX));
        let next = reverse
            .iter()
            .copied()
            .find(|n| !used.contains(n) && *n != from)
            .or_else(|| (hops < *best).then(|| reverse.first().copied()).flatten());
        let Some(next) = next else { return };
        used.insert(next);
        *best = (*best).min(hops);
        let me = self.me;
        let fwd_entry = self.table.get_mut(&r.dest).expect("admitted");
        fwd_entry.precursors.insert(next);
        let advertised = fwd_entry.advertise(hops);
        if !fwd_entry.paths.iter().any(|p| p.next_hop == from && p.hops == hops) {
            return;
        }
        let last_hop = r.last_hop.unwrap_or(me);
        let mut route = Vec::with_capacity(r.route.len() + 1);
        route.push(me);
        route.extend(&r.route);
        if let Some(rev) = self.table.get_mut(&r.origin) {
            rev.precursors.insert(from);
        }
        let fwd = Rrep { hops, advertised, last_hop: Some(last_hop), route, ..r };
        ctx.control(wrap(Msg::Rrep(fwd)), Dest::Unicast(next));
    }

    fn remove_paths_via(&mut self, dest_filter: impl Fn(NodeId) -> bool, neighbor: NodeId) -> (Vec<(NodeId, u32)>, bool) {
        let mut unreachable = Vec::new();
        let mut absorbed = false;
        for (&dest, e) in self.table.iter_mut().filter(|(d, _)| dest_filter(**d)) {
            let before = e.paths.len();
            e.paths.retain(|p| p.next_hop != neighbor);
            if e.paths.len() == before {
                continue;
            }
            if e.paths.is_empty() {
                e.seq = e.seq.map(|s| s + 1);
                if !e.precursors.is_empty() {
                    if let Some(s) = e.seq {
                        unreachable.push((dest, s));
                    }
                }
            } else {
                absorbed = true;
            }
        }
        (unreachable, absorbed)
    }

    fn on_rerr(&mut self, ctx: &mut Ctx, from: NodeId, unreachable: Vec<(NodeId, u32)>) {
        let dests: HashSet<NodeId> = unreachable.iter().map(|&(d, _)| d).collect();
        let (propagate, _) = self.remove_paths_via(|d| dests.contains(&d), from);
        if !propagate.is_empty() {
            self.stats.rerr_sent += 1;
            ctx.control(wrap(Msg::Rerr { unreachable: propagate }), Dest::Broadcast);
        }
    }

    pub fn on_link_break(&mut self, ctx: &mut Ctx, neighbor: NodeId, pkt: Option<DataPacket>) {
        let (unreachable, absorbed) = self.remove_paths_via(|_| true, neighbor);
        if absorbed {
            self.stats.failovers += 1;
        }
        if !unreachable.is_empty() {
            self.stats.rerr_sent += 1;
            ctx.control(wrap(Msg::Rerr { unreachable }), Dest::Broadcast);
        }
        if let Some(pkt) = pkt {
            if self.route(pkt.dst, ctx.now).is_some() || pkt.src == self.me {
                self.on_data(ctx, pkt);
            } else {
                ctx.drop_data(pkt, DropReason::NoRoute);
            }
        }
    }
}
