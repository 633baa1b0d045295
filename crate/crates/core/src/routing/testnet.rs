//! Ideal network for exercising routers over a fixed graph, without a MAC.
//!
//! Every frame takes one millisecond per hop. A unicast to a non-neighbour
//! is reported back to the sender as a link break.

use std::collections::BTreeSet;

use super::{Action, ControlMsg, Ctx, DataPacket, Dest, NodeId, RouteInfo, Router, RouterTimer, RoutingConfig};
use crate::sim::{RngStream, Scheduler, SimTime};
use crate::trace::DropReason;

const HOP_DELAY: f64 = 1e-3;

#[derive(Debug, Clone)]
enum Ev {
    Timer(RouterTimer),
    Control { from: NodeId, msg: ControlMsg },
    Data { pkt: DataPacket },
}

pub struct TestNet {
    routers: Vec<Router>,
    links: BTreeSet<(NodeId, NodeId)>,
    sched: Scheduler<Ev>,
    rng: RngStream,
    pub delivered: Vec<DataPacket>,
    pub dropped: Vec<(DataPacket, DropReason)>,
    pub control_sent: Vec<(NodeId, ControlMsg)>,
    pub data_hops: u64,
    next_id: u64,
}

impl TestNet {
    pub fn new(cfg: &RoutingConfig, n: u32, edges: &[(NodeId, NodeId)], seed: u64) -> Self {
        let mut net = TestNet {
            routers: (0..n).map(|i| Router::new(cfg, i)).collect(),
            links: BTreeSet::new(),
            sched: Scheduler::new(),
            rng: RngStream::new(seed, "routing"),
            delivered: Vec::new(),
            dropped: Vec::new(),
            control_sent: Vec::new(),
            data_hops: 0,
            next_id: 0,
        };
        for &(a, b) in edges {
            net.link(a, b);
        }
        for i in 0..n {
            net.with_router(i, |r, ctx| r.start(ctx));
        }
        net
    }

    pub fn link(&mut self, a: NodeId, b: NodeId) {
        self.links.insert((a.min(b), a.max(b)));
    }

    pub fn unlink(&mut self, a: NodeId, b: NodeId) {
        self.links.remove(&(a.min(b), a.max(b)));
    }

    fn adjacent(&self, a: NodeId, b: NodeId) -> bool {
        self.links.contains(&(a.min(b), a.max(b)))
    }

    pub fn router(&self, n: NodeId) -> Option<&Router> {
        self.routers.get(n as usize)
    }

    pub fn route(&self, from: NodeId, to: NodeId) -> Option<RouteInfo> {
        self.routers[from as usize].route(to, self.sched.now().secs())
    }

    pub fn now(&self) -> f64 {
        self.sched.now().secs()
    }

    pub fn send(&mut self, src: NodeId, dst: NodeId) {
        self.next_id += 1;
        let pkt = DataPacket { id: self.next_id, flow: 0, src, dst, size: 512, ttl: 64, seq: 0, created: self.now() };
        self.with_router(src, |r, ctx| r.on_data(ctx, pkt));
    }

    fn with_router(&mut self, me: NodeId, f: impl FnOnce(&mut Router, &mut Ctx)) {
        let mut ctx = Ctx::new(self.sched.now().secs(), me, &mut self.rng);
        f(&mut self.routers[me as usize], &mut ctx);
        let actions = ctx.actions;
        for a in actions {
            self.apply(me, a);
        }
    }

    fn apply(&mut self, me: NodeId, action: Action) {
        match action {
            Action::SendData { pkt, next_hop } => {
                if self.adjacent(me, next_hop) {
                    self.data_hops += 1;
                    self.sched.schedule_in(HOP_DELAY, next_hop, Ev::Data { pkt });
                } else {
                    self.with_router(me, |r, ctx| r.on_link_break(ctx, next_hop, Some(pkt)));
                }
            }
            Action::DropData { pkt, reason } => self.dropped.push((pkt, reason)),
            Action::SendControl { msg, to } => {
                self.control_sent.push((me, msg.clone()));
                match to {
                    Dest::Broadcast => {
                        let nbs: Vec<NodeId> =
                            (0..self.routers.len() as NodeId).filter(|&n| n != me && self.adjacent(me, n)).collect();
                        for n in nbs {
                            self.sched.schedule_in(HOP_DELAY, n, Ev::Control { from: me, msg: msg.clone() });
                        }
                    }
                    Dest::Unicast(n) if self.adjacent(me, n) => {
                        self.sched.schedule_in(HOP_DELAY, n, Ev::Control { from: me, msg });
                    }
                    Dest::Unicast(n) => self.with_router(me, |r, ctx| r.on_link_break(ctx, n, None)),
                }
            }
            Action::Timer { delay, timer } => {
                self.sched.schedule_in(delay, me, Ev::Timer(timer));
            }
        }
    }

    pub fn run_until(&mut self, t: f64) {
        while let Some(ev) = self.sched.pop_until(SimTime::from_secs(t)) {
            let me = ev.target;
            match ev.payload {
                Ev::Timer(timer) => self.with_router(me, |r, ctx| r.on_timer(ctx, timer)),
                Ev::Control { from, msg } => self.with_router(me, |r, ctx| r.on_control(ctx, from, msg)),
                Ev::Data { mut pkt } => {
                    if pkt.dst == me {
                        self.delivered.push(pkt);
                    } else if pkt.ttl <= 1 {
                        self.dropped.push((pkt, DropReason::Ttl));
                    } else {
                        pkt.ttl -= 1;
                        self.with_router(me, |r, ctx| r.on_data(ctx, pkt));
                    }
                }
            }
        }
        self.sched.advance_to(SimTime::from_secs(t)).expect("time moves forward");
    }
}
