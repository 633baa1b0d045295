//! Destination-Sequenced Distance Vector routing.
//!
//! Each node advertises its full table every `full_dump_interval` and bumps
//! its own even sequence number per advertisement. Broken routes carry odd
//! sequence numbers. Changed entries go out in rate-limited triggered
//! updates: broken ones immediately, new or re-metred ones once their metric
//! has been stable for `settling_time`. Unsettled entries are never
//! advertised.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ControlMsg, Ctx, DataPacket, Dest, NodeId, RouteInfo, RouterTimer, INFINITE_METRIC};
use crate::trace::DropReason;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsdvParams {
    pub full_dump_interval: f64,
    pub settling_time: f64,
    pub neighbor_timeout: f64,
    pub trigger_min_interval: f64,
}

impl Default for DsdvParams {
    fn default() -> Self {
        DsdvParams { full_dump_interval: 15.0, settling_time: 6.0, neighbor_timeout: 45.0, trigger_min_interval: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Advert {
    pub dest: NodeId,
    pub metric: u32,
    pub seq: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Msg {
    Update { entries: Vec<Advert> },
}

impl Msg {
    pub fn size(&self) -> u32 {
        let Msg::Update { entries } = self;
        28 + 12 * entries.len() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Timer {
    Dump,
    Trigger,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub next_hop: NodeId,
    pub metric: u32,
    pub seq: u32,
    /// Time of the last metric change.
    pub changed_at: f64,
    /// Fresher but longer alternative, used if the current route breaks.
    pending: Option<(NodeId, u32, u32)>,
}

impl Entry {
    pub fn is_broken(&self) -> bool {
        self.metric == INFINITE_METRIC
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DsdvStats {
    pub full_dumps: u64,
    pub triggered: u64,
}

#[derive(Debug, Clone)]
pub struct Dsdv {
    me: NodeId,
    p: DsdvParams,
    seq: u32,
    table: BTreeMap<NodeId, Entry>,
    heard: BTreeMap<NodeId, f64>,
    /// Entries changed since they were last advertised.
    dirty: BTreeSet<NodeId>,
    last_trigger: Option<f64>,
    /// Earliest pending trigger timer.
    trigger_at: Option<f64>,
    stats: DsdvStats,
}

fn wrap(m: Msg) -> ControlMsg {
    ControlMsg::Dsdv(m)
}

impl Dsdv {
    pub fn new(me: NodeId, p: DsdvParams) -> Self {
        Dsdv {
            me,
            p,
            seq: 0,
            table: BTreeMap::new(),
            heard: BTreeMap::new(),
            dirty: BTreeSet::new(),
            last_trigger: None,
            trigger_at: None,
            stats: DsdvStats::default(),
        }
    }

    pub fn stats(&self) -> &DsdvStats {
        &self.stats
    }

    pub fn entry(&self, dest: NodeId) -> Option<&Entry> {
        self.table.get(&dest)
    }

    pub fn own_seq(&self) -> u32 {
        self.seq
    }

    pub fn route(&self, dest: NodeId) -> Option<RouteInfo> {
        self.table
            .get(&dest)
            .filter(|e| !e.is_broken())
            .map(|e| RouteInfo { next_hop: e.next_hop, hops: e.metric })
    }

    /// Schedules the first full dump at a uniform phase in `[0, 1)` s.
    pub fn start(&mut self, ctx: &mut Ctx) {
        let phase = ctx.rng.uniform(0.0, 1.0);
        ctx.timer(phase, RouterTimer::Dsdv(Timer::Dump));
    }

    pub fn on_data(&mut self, ctx: &mut Ctx, pkt: DataPacket) {
        match self.route(pkt.dst) {
            Some(r) => ctx.send_data(pkt, r.next_hop),
            None => ctx.drop_data(pkt, DropReason::NoRoute),
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::Dump => {
                let stale: Vec<NodeId> = self
                    .heard
                    .iter()
                    .filter(|&(_, &t)| ctx.now - t > self.p.neighbor_timeout)
                    .map(|(&n, _)| n)
                    .collect();
                for n in stale {
                    self.break_neighbor(n, ctx.now);
                }
                self.seq += 2;
                let mut entries = vec![Advert { dest: self.me, metric: 0, seq: self.seq }];
                entries.extend(
                    self.table
                        .iter()
                        .filter(|(_, e)| self.ready_at(e) <= ctx.now)
                        .map(|(&dest, e)| Advert { dest, metric: e.metric, seq: e.seq }),
                );
                self.stats.full_dumps += 1;
                ctx.control(wrap(Msg::Update { entries }), Dest::Broadcast);
                ctx.timer(self.p.full_dump_interval, RouterTimer::Dsdv(Timer::Dump));
                let table = &self.table;
                let (settling, now) = (self.p.settling_time, ctx.now);
                self.dirty.retain(|d| table.get(d).is_some_and(|e| !e.is_broken() && now - e.changed_at < settling));
            }
            Timer::Trigger => {
                if self.trigger_at.is_some_and(|t| ctx.now >= t - 1e-9) {
                    self.trigger_at = None;
                }
            }
        }
        if !self.dirty.is_empty() {
            self.schedule_trigger(ctx);
        }
    }

    /// When an entry may be advertised: broken ones at once, others after settling.
    fn ready_at(&self, e: &Entry) -> f64 {
        if e.is_broken() { e.changed_at } else { e.changed_at + self.p.settling_time }
    }

    fn schedule_trigger(&mut self, ctx: &mut Ctx) {
        let Some(ready) = self.dirty.iter().filter_map(|d| self.table.get(d)).map(|e| self.ready_at(e)).reduce(f64::min) else {
            return;
        };
        let allowed = self.last_trigger.map_or(ctx.now, |t| t + self.p.trigger_min_interval);
        let at = ready.max(allowed).max(ctx.now);
        if at <= ctx.now {
            self.send_trigger(ctx);
            self.schedule_trigger(ctx);
        } else if self.trigger_at.is_none_or(|t| at < t - 1e-9) {
            self.trigger_at = Some(at);
            ctx.timer(at - ctx.now, RouterTimer::Dsdv(Timer::Trigger));
        }
    }

    fn send_trigger(&mut self, ctx: &mut Ctx) {
        let ready: Vec<NodeId> =
            self.dirty.iter().copied().filter(|d| self.table.get(d).is_some_and(|e| self.ready_at(e) <= ctx.now)).collect();
        let entries: Vec<Advert> = ready
            .iter()
            .map(|&dest| {
                self.dirty.remove(&dest);
                let e = &self.table[&dest];
                Advert { dest, metric: e.metric, seq: e.seq }
            })
            .collect();
        self.dirty.retain(|d| self.table.contains_key(d));
        if entries.is_empty() {
            return;
        }
        self.last_trigger = Some(ctx.now);
        self.stats.triggered += 1;
        ctx.control(wrap(Msg::Update { entries }), Dest::Broadcast);
    }

    fn mark_broken(&mut self, dest: NodeId, now: f64) {
        let e = self.table.get_mut(&dest).expect("caller checked");
        if let Some((next_hop, metric, seq)) = e.pending.take() {
            if seq > e.seq {
                *e = Entry { next_hop, metric, seq, changed_at: now, pending: None };
                self.dirty.insert(dest);
                return;
            }
        }
        e.metric = INFINITE_METRIC;
        if e.seq.is_multiple_of(2) {
            e.seq += 1;
        }
        e.changed_at = now;
        self.dirty.insert(dest);
    }

    fn break_neighbor(&mut self, neighbor: NodeId, now: f64) {
        self.heard.remove(&neighbor);
        let affected: Vec<NodeId> = self
            .table
            .iter()
            .filter(|(_, e)| e.next_hop == neighbor && !e.is_broken())
            .map(|(&d, _)| d)
            .collect();
        for d in affected {
            self.mark_broken(d, now);
        }
        for e in self.table.values_mut() {
            if e.pending.is_some_and(|(n, _, _)| n == neighbor) {
                e.pending = None;
            }
        }
    }

    pub fn on_control(&mut self, ctx: &mut Ctx, from: NodeId, msg: Msg) {
        let Msg::Update { entries } = msg;
        self.heard.insert(from, ctx.now);
        for a in entries {
            if a.dest == self.me {
                continue;
            }
            let metric = a.metric.saturating_add(1);
            let fresh = Entry { next_hop: from, metric, seq: a.seq, changed_at: ctx.now, pending: None };
            let Some(e) = self.table.get_mut(&a.dest) else {
                if metric != INFINITE_METRIC {
                    self.table.insert(a.dest, fresh);
                    self.dirty.insert(a.dest);
                }
                continue;
            };
            let adopt = if e.next_hop == from {
                a.seq > e.seq || (a.seq == e.seq && metric != e.metric)
            } else {
                (a.seq > e.seq && (metric <= e.metric || e.is_broken())) || (a.seq == e.seq && metric < e.metric)
            };
            if adopt {
                let was_broken = e.is_broken();
                if metric == e.metric && e.next_hop == from {
                    e.seq = a.seq;
                    continue;
                }
                let pending = e.pending.filter(|&(_, _, s)| s > a.seq);
                let same_metric = metric == e.metric;
                let changed_at = if same_metric { e.changed_at } else { ctx.now };
                *e = Entry { pending, changed_at, ..fresh };
                if metric == INFINITE_METRIC && !was_broken {
                    // May promote the pending route instead of staying broken.
                    self.mark_broken(a.dest, ctx.now);
                } else if !same_metric {
                    self.dirty.insert(a.dest);
                }
            } else if a.seq > e.seq && metric != INFINITE_METRIC && e.next_hop != from {
                let better = e.pending.is_none_or(|(_, m, s)| a.seq > s || (a.seq == s && metric < m));
                if better {
                    e.pending = Some((from, metric, a.seq));
                }
            }
        }
        if !self.dirty.is_empty() {
            self.schedule_trigger(ctx);
        }
    }

    pub fn on_link_break(&mut self, ctx: &mut Ctx, neighbor: NodeId, pkt: Option<DataPacket>) {
        self.break_neighbor(neighbor, ctx.now);
        if !self.dirty.is_empty() {
            self.schedule_trigger(ctx);
        }
        if let Some(pkt) = pkt {
            self.on_data(ctx, pkt);
        }
    }
}
