mod common;

use proptest::prelude::*;
use vanetbench::agents::CbrFlow;
use vanetbench::metrics::{analyze, tally};
use vanetbench::network::{LinkTable, Network, NetworkConfig, Topology};
use vanetbench::routing::{NodeId, Protocol, RoutingConfig};
use vanetbench::scenario::Scenario;
use vanetbench::trace::{PacketKind, TraceEvent};

fn protocol() -> impl Strategy<Value = Protocol> {
    prop::sample::select(Protocol::ALL.to_vec())
}

fn flow(flow_id: u32, src: NodeId, dst: NodeId, start: f64, stop: f64) -> CbrFlow {
    CbrFlow { flow_id, src, dst, packet_size: 512, rate: 4.0, start, stop }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Small vehicular runs: every packet class balances and causality holds.
    #[test]
    fn road_runs_conserve_packets(seed in 0u64..1_000, protocol in protocol()) {
        let s = Scenario::parse(
            "[graph.grid]\nrows = 3\ncols = 3\nspacing = 200.0\n[mobility]\nvehicles = 15\n[traffic]\ncbr_connections = 4\n[run]\nduration = 15.0\n",
            &[],
        )
        .unwrap()
        .with_protocol(protocol)
        .with_seed(seed);
        let out = s.build().unwrap().finish();
        prop_assert!(out.trace.windows(2).all(|w| w[0].time_ns <= w[1].time_ns));
        for kind in [PacketKind::Cbr, PacketKind::Pbc, PacketKind::Control] {
            let t = tally(&out.trace, kind).unwrap();
            prop_assert!(t.is_conserved(), "{:?}: {:?}", kind, t);
            if t.sent > 0 {
                let m = analyze(&out.trace, kind).unwrap();
                prop_assert_eq!(m.pdr.unwrap() + m.drop_pct.unwrap(), 100.0);
            }
        }
        let mut sent = std::collections::BTreeMap::new();
        for r in &out.trace {
            match r.event {
                TraceEvent::Sent => { sent.entry(r.packet_id).or_insert(r.time_ns); }
                TraceEvent::Received | TraceEvent::Dropped => {
                    let t0 = sent.get(&r.packet_id).copied();
                    prop_assert!(t0.is_some_and(|t0| t0 <= r.time_ns), "packet {} ends before it starts", r.packet_id);
                }
                _ => {}
            }
        }
    }
}

/// On a lossless chain every protocol delivers nearly everything over shortest paths
/// (3 forwards for 0 -> 4, 2 for 4 -> 1).
#[test]
fn chain_delivers_after_convergence() {
    let edges: Vec<(NodeId, NodeId)> = (0..4).map(|i| (i, i + 1)).collect();
    for protocol in Protocol::ALL {
        let mut cfg = NetworkConfig { duration: 60.0, routing: RoutingConfig { protocol, ..Default::default() }, ..Default::default() };
        cfg.traffic.beacons = false;
        let flows = vec![flow(0, 0, 4, 30.0, 55.0), flow(1, 4, 1, 30.0, 55.0)];
        let out = Network::with_flows(cfg, Topology::Links(LinkTable::perfect(5, &edges)), flows).unwrap().finish();
        let m = analyze(&out.trace, PacketKind::Cbr).unwrap();
        assert!(m.pdr.unwrap() > 95.0, "{protocol}: pdr {:?}", m.pdr);
        let per_packet = m.forwards as f64 / m.received as f64;
        assert!((per_packet - 2.5).abs() < 0.1, "{protocol}: {per_packet} forwards per delivery");
    }
}

/// Removing the only bridge makes later packets fail without breaking conservation.
#[test]
fn partition_drops_but_conserves() {
    let mut cfg = NetworkConfig { duration: 40.0, ..Default::default() };
    cfg.traffic.beacons = false;
    for protocol in Protocol::ALL {
        cfg.routing.protocol = protocol;
        let edges = [(0, 1), (1, 2)];
        let mut net = Network::with_flows(cfg.clone(), Topology::Links(LinkTable::perfect(3, &edges)), vec![flow(0, 0, 2, 5.0, 35.0)]).unwrap();
        net.run_until(20.0);
        net.links_mut().unwrap().unlink(1, 2);
        let out = net.finish();
        let t = tally(&out.trace, PacketKind::Cbr).unwrap();
        assert!(t.is_conserved(), "{protocol}");
        assert!(t.received > 0 && t.dropped_total() > 0, "{protocol}: {t:?}");
        let late = out.trace.iter().filter(|r| r.event == TraceEvent::Received && r.kind == PacketKind::Cbr && r.time() > 21.0).count();
        assert_eq!(late, 0, "{protocol}");
    }
}
