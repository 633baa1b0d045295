//! Ad hoc On-demand Distance Vector routing.
//!
//! Route discovery uses an expanding ring search followed by network-wide
//! retries. Link breaks come only from the MAC; there are no HELLO messages.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{ControlMsg, Ctx, DataPacket, Dest, NodeId, RouteInfo, RouterTimer};
use crate::trace::DropReason;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AodvParams {
    pub active_route_timeout: f64,
    pub rreq_retries: u32,
    /// TTLs of the expanding ring search, before network-wide requests.
    pub ring_ttls: Vec<u32>,
    pub net_diameter: u32,
    pub node_traversal_time: f64,
    pub buffer_capacity: usize,
    pub buffer_timeout: f64,
    /// Intermediate nodes with a fresh enough route answer requests.
    pub intermediate_replies: bool,
}

impl Default for AodvParams {
    fn default() -> Self {
        AodvParams {
            active_route_timeout: 3.0,
            rreq_retries: 2,
            ring_ttls: vec![1, 3, 7],
            net_diameter: 35,
            node_traversal_time: 0.04,
            buffer_capacity: 64,
            buffer_timeout: 30.0,
            intermediate_replies: true,
        }
    }
}

impl AodvParams {
    /// Total route requests per discovery.
    pub fn attempts(&self) -> u32 {
        self.ring_ttls.len() as u32 + 1 + self.rreq_retries
    }

    pub fn ttl(&self, attempt: u32) -> u32 {
        self.ring_ttls.get(attempt as usize).copied().unwrap_or(self.net_diameter)
    }

    pub fn wait(&self, attempt: u32) -> f64 {
        let ring = self.ring_ttls.len() as u32;
        if attempt < ring {
            2.0 * self.node_traversal_time * (self.ttl(attempt) + 2) as f64
        } else {
            2.0 * self.node_traversal_time * self.net_diameter as f64 * 2f64.powi((attempt - ring) as i32)
        }
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
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rrep {
    pub origin: NodeId,
    pub dest: NodeId,
    pub dest_seq: u32,
    pub hops: u32,
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
            Msg::Rreq(_) => 24,
            Msg::Rrep(_) => 20,
            Msg::Rerr { unreachable } => 4 + 8 * unreachable.len() as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Timer {
    Discovery { dest: NodeId, attempt: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub seq: Option<u32>,
    pub hops: u32,
    pub next_hop: NodeId,
    pub expires: f64,
    pub valid: bool,
    pub precursors: BTreeSet<NodeId>,
}

#[derive(Debug, Clone)]
struct Pending {
    attempt: u32,
    buffer: VecDeque<(DataPacket, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AodvStats {
    pub rreq_originated: u64,
    pub rreq_forwarded: u64,
    pub rrep_sent: u64,
    pub rerr_sent: u64,
    pub discoveries_failed: u64,
}

#[derive(Debug, Clone)]
pub struct Aodv {
    me: NodeId,
    p: AodvParams,
    seq: u32,
    rreq_id: u32,
    table: BTreeMap<NodeId, Entry>,
    /// Best hop count seen per `(origin, rreq id)`.
    seen: HashMap<(NodeId, u32), u32>,
    pending: BTreeMap<NodeId, Pending>,
    stats: AodvStats,
}

fn wrap(m: Msg) -> ControlMsg {
    ControlMsg::Aodv(m)
}

/// Sequence comparison: `a` is fresher than `b`.
fn fresher(a: u32, b: Option<u32>) -> bool {
    b.is_none_or(|b| a > b)
}

impl Aodv {
    pub fn new(me: NodeId, p: AodvParams) -> Self {
        Aodv {
            me,
            p,
            seq: 0,
            rreq_id: 0,
            table: BTreeMap::new(),
            seen: HashMap::new(),
            pending: BTreeMap::new(),
            stats: AodvStats::default(),
        }
    }

    pub fn stats(&self) -> &AodvStats {
        &self.stats
    }

    pub fn entry(&self, dest: NodeId) -> Option<&Entry> {
        self.table.get(&dest)
    }

    fn active(&self, dest: NodeId, now: f64) -> Option<&Entry> {
        self.table.get(&dest).filter(|e| e.valid && e.expires > now)
    }

    /// Valid, unexpired route.
    pub fn route(&self, dest: NodeId, now: f64) -> Option<RouteInfo> {
        self.active(dest, now)
            .map(|e| RouteInfo { next_hop: e.next_hop, hops: e.hops })
    }

    fn refresh(&mut self, dest: NodeId, now: f64) {
        let t = now + self.p.active_route_timeout;
        if let Some(e) = self.table.get_mut(&dest) {
            if e.valid {
                e.expires = e.expires.max(t);
            }
        }
    }

    fn touch_neighbor(&mut self, nb: NodeId, now: f64) {
        let expires = now + self.p.active_route_timeout;
        let e = self.table.entry(nb).or_insert(Entry {
            seq: None,
            hops: 1,
            next_hop: nb,
            expires,
            valid: true,
            precursors: BTreeSet::new(),
        });
        if !e.valid || e.hops > 1 || e.next_hop != nb {
            e.hops = 1;
            e.next_hop = nb;
            e.valid = true;
        }
        e.expires = e.expires.max(expires);
    }

    /// Installs or improves the route to `dest`; true if the entry changed.
    fn update_route(&mut self, dest: NodeId, seq: Option<u32>, hops: u32, next_hop: NodeId, now: f64) -> bool {
        let expires = now + self.p.active_route_timeout;
        match self.table.get_mut(&dest) {
            None => {
                self.table.insert(dest, Entry { seq, hops, next_hop, expires, valid: true, precursors: BTreeSet::new() });
                true
            }
            Some(e) => {
                let better = !e.valid
                    || e.expires <= now
                    || seq.is_some_and(|s| fresher(s, e.seq))
                    || (seq == e.seq && hops < e.hops);
                if better {
                    e.seq = seq.or(e.seq);
                    e.hops = hops;
                    e.next_hop = next_hop;
                    e.valid = true;
                    e.expires = expires;
                } else if e.valid && e.next_hop == next_hop && e.hops == hops {
                    e.expires = e.expires.max(expires);
                }
                better
            }
        }
    }

    pub fn on_data(&mut self, ctx: &mut Ctx, pkt: DataPacket) {
        if let Some(e) = self.active(pkt.dst, ctx.now) {
            let next = e.next_hop;
            self.refresh(pkt.dst, ctx.now);
            self.refresh(next, ctx.now);
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
        if pending.buffer.len() >= self.p.buffer_capacity {
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
        let dest_seq = self.table.get(&dest).and_then(|e| e.seq);
        self.stats.rreq_originated += 1;
        ctx.control(
            wrap(Msg::Rreq(Rreq {
                id: self.rreq_id,
                origin: self.me,
                origin_seq: self.seq,
                dest,
                dest_seq,
                hops: 0,
                ttl: self.p.ttl(attempt),
            })),
            Dest::Broadcast,
        );
        ctx.timer(self.p.wait(attempt), RouterTimer::Aodv(Timer::Discovery { dest, attempt }));
    }

    fn flush(&mut self, ctx: &mut Ctx, dest: NodeId) {
        let Some(pending) = self.pending.remove(&dest) else { return };
        for (pkt, queued) in pending.buffer {
            if ctx.now - queued > self.p.buffer_timeout {
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
        if self.active(dest, ctx.now).is_some() {
            self.flush(ctx, dest);
            return;
        }
        let next = attempt + 1;
        let pending = self.pending.get_mut(&dest).expect("checked above");
        let timeout = self.p.buffer_timeout;
        while pending.buffer.front().is_some_and(|(_, q)| ctx.now - q > timeout) {
            let (pkt, _) = pending.buffer.pop_front().expect("non-empty");
            ctx.drop_data(pkt, DropReason::NoRoute);
        }
        if next >= self.p.attempts() || pending.buffer.is_empty() {
            let pending = self.pending.remove(&dest).expect("checked above");
            if !pending.buffer.is_empty() {
                self.stats.discoveries_failed += 1;
            }
            for (pkt, _) in pending.buffer {
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
        let key = (r.origin, r.id);
        match self.seen.get(&key) {
            // A later copy is only worth processing when it came over fewer hops.
            Some(&best) if best <= hops => return,
            _ => {
                self.seen.insert(key, hops);
            }
        }
        self.update_route(r.origin, Some(r.origin_seq), hops, from, ctx.now);
        if r.dest == self.me {
            if let Some(s) = r.dest_seq {
                self.seq = self.seq.max(s);
            }
            self.stats.rrep_sent += 1;
            let rrep = Rrep { origin: r.origin, dest: self.me, dest_seq: self.seq, hops: 0 };
            ctx.control(wrap(Msg::Rrep(rrep)), Dest::Unicast(from));
            return;
        }
        if self.p.intermediate_replies {
            if let Some(e) = self.active(r.dest, ctx.now) {
                if let Some(seq) = e.seq.filter(|&s| r.dest_seq.is_none_or(|d| s >= d)) {
                    let (next, known_hops) = (e.next_hop, e.hops);
                    self.table.get_mut(&r.dest).expect("active").precursors.insert(from);
                    if let Some(rev) = self.table.get_mut(&r.origin) {
                        rev.precursors.insert(next);
                    }
                    self.stats.rrep_sent += 1;
                    let rrep = Rrep { origin: r.origin, dest: r.dest, dest_seq: seq, hops: known_hops };
                    ctx.control(wrap(Msg::Rrep(rrep)), Dest::Unicast(from));
                    return;
                }
            }
        }
        if r.ttl > 1 {
            self.stats.rreq_forwarded += 1;
            ctx.control(wrap(Msg::Rreq(Rreq { hops, ttl: r.ttl - 1, ..r })), Dest::Broadcast);
        }
    }

    fn on_rrep(&mut self, ctx: &mut Ctx, from: NodeId, r: Rrep) {
        if r.dest == self.me {
            return;
        }
        self.update_route(r.dest, Some(r.dest_seq), r.hops + 1, from, ctx.now);
        if r.origin == self.me {
            if self.active(r.dest, ctx.now).is_some() {
                self.flush(ctx, r.dest);
            }
            return;
        }
        let Some(rev) = self.active(r.origin, ctx.now) else { return };
        let rev_next = rev.next_hop;
        self.refresh(r.origin, ctx.now);
        let fwd = self.table.get_mut(&r.dest).expect("installed above");
        fwd.precursors.insert(rev_next);
        // Pass on this node's best knowledge, which may beat the reply just received.
        let rrep = Rrep {
            origin: r.origin,
            dest: r.dest,
            dest_seq: fwd.seq.unwrap_or(r.dest_seq),
            hops: fwd.hops,
        };
        let fwd_next = fwd.next_hop;
        if let Some(e) = self.table.get_mut(&r.origin) {
            e.precursors.insert(fwd_next);
        }
        ctx.control(wrap(Msg::Rrep(rrep)), Dest::Unicast(rev_next));
    }

    fn on_rerr(&mut self, ctx: &mut Ctx, from: NodeId, unreachable: Vec<(NodeId, u32)>) {
        let mut propagate = Vec::new();
        for (dest, seq) in unreachable {
            if let Some(e) = self.table.get_mut(&dest) {
                if e.valid && e.next_hop == from {
                    e.valid = false;
                    e.seq = Some(e.seq.map_or(seq, |s| s.max(seq)));
                    if !e.precursors.is_empty() {
                        propagate.push((dest, e.seq.expect("just set")));
                    }
                }
            }
        }
        if !propagate.is_empty() {
            self.stats.rerr_sent += 1;
            ctx.control(wrap(Msg::Rerr { unreachable: propagate }), Dest::Broadcast);
        }
    }

    pub fn on_link_break(&mut self, ctx: &mut Ctx, neighbor: NodeId, pkt: Option<DataPacket>) {
        let mut unreachable = Vec::new();
        for (&dest, e) in self.table.iter_mut() {
            if e.valid && e.next_hop == neighbor {
                e.valid = false;
                e.seq = e.seq.map(|s| s + 1);
                if !e.precursors.is_empty() {
                    if let Some(s) = e.seq {
                        unreachable.push((dest, s));
                    }
                }
            }
        }
        if !unreachable.is_empty() {
            self.stats.rerr_sent += 1;
            ctx.control(wrap(Msg::Rerr { unreachable }), Dest::Broadcast);
        }
        if let Some(pkt) = pkt {
            if pkt.src == self.me {
                self.buffer(ctx, pkt);
            } else {
                ctx.drop_data(pkt, DropReason::NoRoute);
            }
        }
    }
}
