//! Trace analysis: packet fates, the nine QoS metrics and delay/jitter series.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::trace::{DropReason, Layer, PacketKind, TraceEvent, TraceRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("trace corruption: {0}")]
    Corrupt(String),
    #[error("throughput window is empty")]
    EmptyWindow,
}

/// `P_d = P_s - P_r`.
pub fn packet_drop(sent: u64, received: u64) -> Result<u64, MetricsError> {
    sent.checked_sub(received)
        .ok_or_else(|| MetricsError::Corrupt(format!("received {received} exceeds sent {sent}")))
}

/// Delivery ratio in percent; absent when nothing was sent.
pub fn pdr(sent: u64, received: u64) -> Option<f64> {
    (sent > 0).then(|| received as f64 / sent as f64 * 100.0)
}

pub fn drop_pct(sent: u64, received: u64) -> Option<f64> {
    pdr(sent, received).map(|p| 100.0 - p)
}

pub fn throughput_bytes(packets: u64, packet_size: u64) -> u64 {
    packets * packet_size
}

/// kbit/s over `window` seconds.
pub fn average_throughput(bytes: u64, window: f64) -> Result<f64, MetricsError> {
    if window > 0.0 {
        Ok(bytes as f64 * 8.0 / window / 1000.0)
    } else {
        Err(MetricsError::EmptyWindow)
    }
}

pub fn nrl(control_transmissions: u64, delivered: u64) -> Option<f64> {
    (delivered > 0).then(|| control_transmissions as f64 / delivered as f64)
}

pub fn route_cost(control_bytes: u64, data_bytes: u64) -> Option<f64> {
    (data_bytes > 0).then(|| control_bytes as f64 / data_bytes as f64)
}

/// `1 + forwards / deliveries`.
pub fn hops_per_delivery(forwards: u64, delivered: u64) -> Option<f64> {
    (delivered > 0).then(|| 1.0 + forwards as f64 / delivered as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fate {
    Received,
    Dropped(DropReason),
}

/// Per-class accounting of originated packets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassTally {
    pub sent: u64,
    pub received: u64,
    pub dropped: BTreeMap<DropReason, u64>,
    pub sent_bytes: u64,
    pub received_bytes: u64,
}

impl ClassTally {
    pub fn dropped_total(&self) -> u64 {
        self.dropped.values().sum()
    }

    pub fn is_conserved(&self) -> bool {
        self.sent == self.received + self.dropped_total()
    }
}

/// Fate of every packet of `kind` originated in the trace. A packet counts as
/// received when any receive record exists, otherwise its fate is its last drop.
pub fn packet_fates(records: &[TraceRecord], kind: PacketKind) -> Result<BTreeMap<u64, Fate>, MetricsError> {
    let origin_layer = origin_layer(kind);
    let mut fates: BTreeMap<u64, Option<Fate>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == kind) {
        match r.event {
            TraceEvent::Sent if r.layer == origin_layer => {
                if fates.insert(r.packet_id, None).is_some() {
                    return Err(MetricsError::Corrupt(format!("packet {} originated twice", r.packet_id)));
                }
            }
            TraceEvent::Received | TraceEvent::Dropped | TraceEvent::Forwarded => {
                let slot = fates.get_mut(&r.packet_id).ok_or_else(|| {
                    MetricsError::Corrupt(format!("{} record for unsent packet {}", r.event, r.packet_id))
                })?;
                match r.event {
                    TraceEvent::Received => *slot = Some(Fate::Received),
                    TraceEvent::Dropped if *slot != Some(Fate::Received) => *slot = Some(Fate::Dropped(r.reason)),
                    _ => {}
                }
            }
            TraceEvent::Sent => {}
        }
    }
    fates
        .into_iter()
        .map(|(id, f)| {
            f.map(|f| (id, f))
                .ok_or_else(|| MetricsError::Corrupt(format!("packet {id} has neither a receive nor a drop record")))
        })
        .collect()
}

fn origin_layer(kind: PacketKind) -> Layer {
    match kind {
        PacketKind::Cbr | PacketKind::Pbc => Layer::App,
        PacketKind::Control | PacketKind::Ack => Layer::Mac,
    }
}

pub fn tally(records: &[TraceRecord], kind: PacketKind) -> Result<ClassTally, MetricsError> {
    let fates = packet_fates(records, kind)?;
    let mut t = ClassTally::default();
    let origin_layer = origin_layer(kind);
    let mut sizes = HashMap::new();
    for r in records.iter().filter(|r| r.kind == kind && r.event == TraceEvent::Sent && r.layer == origin_layer) {
        t.sent += 1;
        t.sent_bytes += r.size as u64;
        sizes.insert(r.packet_id, r.size as u64);
    }
    for (id, fate) in fates {
        match fate {
            Fate::Received => {
                t.received += 1;
                t.received_bytes += sizes[&id];
            }
            Fate::Dropped(reason) => *t.dropped.entry(reason).or_default() += 1,
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    pub packet_id: u64,
    pub flow_id: Option<u32>,
    pub sent: f64,
    pub received: f64,
}

impl Delivery {
    pub fn delay(&self) -> f64 {
        self.received - self.sent
    }
}

/// First delivery of every received packet of `kind`, ordered by receive time.
pub fn deliveries(records: &[TraceRecord], kind: PacketKind) -> Result<Vec<Delivery>, MetricsError> {
    let mut sent: HashMap<u64, (f64, Option<u32>)> = HashMap::new();
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for r in records.iter().filter(|r| r.kind == kind) {
        match r.event {
            TraceEvent::Sent if r.layer == origin_layer(kind) => {
                sent.insert(r.packet_id, (r.time(), r.flow_id));
            }
            TraceEvent::Received if seen.insert(r.packet_id) => {
                let &(s, flow) = sent
                    .get(&r.packet_id)
                    .ok_or_else(|| MetricsError::Corrupt(format!("receive without send for packet {}", r.packet_id)))?;
                out.push(Delivery { packet_id: r.packet_id, flow_id: flow, sent: s, received: r.time() });
            }
            _ => {}
        }
    }
    out.sort_by(|a, b| a.received.total_cmp(&b.received).then(a.packet_id.cmp(&b.packet_id)));
    Ok(out)
}

/// `(receive time, D_i)` per delivered packet.
pub fn delay_series(deliveries: &[Delivery]) -> Vec<(f64, f64)> {
    deliveries.iter().map(|d| (d.received, d.delay())).collect()
}

/// `J_i = D_{i+1} - D_i` per flow, stamped at the later receive time and
/// merged across flows in time order.
pub fn jitter_series(deliveries: &[Delivery]) -> Vec<(f64, f64)> {
    let mut by_flow: BTreeMap<Option<u32>, Vec<&Delivery>> = BTreeMap::new();
    for d in deliveries {
        by_flow.entry(d.flow_id).or_default().push(d);
    }
    let mut out: Vec<(f64, f64)> = by_flow
        .values()
        .flat_map(|v| v.windows(2).map(|w| (w[1].received, w[1].delay() - w[0].delay())))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub sent: u64,
    pub received: u64,
    pub dropped: u64,
    pub dropped_by_reason: BTreeMap<DropReason, u64>,
    pub throughput_sent_bytes: u64,
    pub throughput_recv_bytes: u64,
    pub pdr: Option<f64>,
    pub drop_pct: Option<f64>,
    /// kbit/s over the first-send to last-receive window.
    pub avg_throughput: Option<f64>,
    pub nrl: Option<f64>,
    pub route_cost: Option<f64>,
    /// Raw forwards per originated packet.
    pub mean_hop_raw: Option<f64>,
    pub mean_hop: Option<f64>,
    pub control_transmissions: u64,
    pub control_bytes: u64,
    pub forwards: u64,
    pub delay: Vec<(f64, f64)>,
    pub jitter: Vec<(f64, f64)>,
}

impl MetricsReport {
    /// Scalar metrics in a fixed order, `None` when undefined.
    pub fn scalars(&self) -> Vec<(&'static str, Option<f64>)> {
        let mean = |v: &[(f64, f64)]| (!v.is_empty()).then(|| v.iter().map(|p| p.1).sum::<f64>() / v.len() as f64);
        vec![
            ("sent", Some(self.sent as f64)),
            ("received", Some(self.received as f64)),
            ("dropped", Some(self.dropped as f64)),
            ("throughput_sent_bytes", Some(self.throughput_sent_bytes as f64)),
            ("throughput_recv_bytes", Some(self.throughput_recv_bytes as f64)),
            ("pdr", self.pdr),
            ("drop_pct", self.drop_pct),
            ("avg_throughput_kbps", self.avg_throughput),
            ("nrl", self.nrl),
            ("route_cost", self.route_cost),
            ("mean_hop", self.mean_hop),
            ("mean_hop_raw", self.mean_hop_raw),
            ("mean_delay", mean(&self.delay)),
            ("mean_jitter", mean(&self.jitter)),
        ]
    }

    /// Avg. throughput over a fixed nominal duration instead of the flow window.
    pub fn avg_throughput_nominal(&self, duration: f64) -> Result<f64, MetricsError> {
        average_throughput(self.throughput_recv_bytes, duration)
    }
}

/// Full report for data class `kind`.
pub fn analyze(records: &[TraceRecord], kind: PacketKind) -> Result<MetricsReport, MetricsError> {
    let t = tally(records, kind)?;
    let dropped = packet_drop(t.sent, t.received)?;
    if dropped != t.dropped_total() {
        return Err(MetricsError::Corrupt(format!(
            "{} packets sent, {} received, but {} drop fates",
            t.sent,
            t.received,
            t.dropped_total()
        )));
    }
    let deliveries = deliveries(records, kind)?;
    if let Some(d) = deliveries.iter().find(|d| d.delay() < 0.0) {
        return Err(MetricsError::Corrupt(format!("packet {} received before it was sent", d.packet_id)));
    }
    let (mut control_transmissions, mut control_bytes, mut forwards) = (0, 0, 0);
    let mut first_send = f64::INFINITY;
    for r in records {
        match (r.kind, r.event) {
            (PacketKind::Control, TraceEvent::Sent) => {
                control_transmissions += 1;
                control_bytes += r.size as u64;
            }
            (k, TraceEvent::Forwarded) if k == kind => forwards += 1,
            (k, TraceEvent::Sent) if k == kind => first_send = first_send.min(r.time()),
            _ => {}
        }
    }
    let avg_throughput = deliveries
        .last()
        .and_then(|last| average_throughput(t.received_bytes, last.received - first_send).ok());
    let delay = delay_series(&deliveries);
    let jitter = jitter_series(&deliveries);
    Ok(MetricsReport {
        sent: t.sent,
        received: t.received,
        dropped,
        dropped_by_reason: t.dropped,
        throughput_sent_bytes: t.sent_bytes,
        throughput_recv_bytes: t.received_bytes,
        pdr: pdr(t.sent, t.received),
        drop_pct: drop_pct(t.sent, t.received),
        avg_throughput,
        nrl: nrl(control_transmissions, t.received),
        route_cost: route_cost(control_bytes, t.sent_bytes),
        mean_hop_raw: (t.sent > 0).then(|| forwards as f64 / t.sent as f64),
        mean_hop: hops_per_delivery(forwards, t.received),
        control_transmissions,
        control_bytes,
        forwards,
        delay,
        jitter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::quantize;

    fn rec(t: f64, event: TraceEvent, reason: DropReason, layer: Layer, kind: PacketKind, id: u64, flow: Option<u32>) -> TraceRecord {
        TraceRecord { time_ns: quantize(t), event, reason, layer, kind, packet_id: id, flow_id: flow, node: 0, size: 512 }
    }

    fn sent(t: f64, id: u64, flow: u32) -> TraceRecord {
        rec(t, TraceEvent::Sent, DropReason::None, Layer::App, PacketKind::Cbr, id, Some(flow))
    }

    fn recv(t: f64, id: u64, flow: u32) -> TraceRecord {
        rec(t, TraceEvent::Received, DropReason::None, Layer::App, PacketKind::Cbr, id, Some(flow))
    }

    #[test]
    fn drop_counts() {
        assert_eq!(packet_drop(13153, 5594), Ok(7559));
        assert_eq!(packet_drop(13112, 5609), Ok(7503));
        assert_eq!(packet_drop(0, 0), Ok(0));
        assert!(packet_drop(1, 2).is_err());
    }

    #[test]
    fn byte_totals() {
        assert_eq!(throughput_bytes(5594, 512), 2_864_128);
        assert_eq!(throughput_bytes(13153, 512), 6_734_336);
        assert_eq!(throughput_bytes(0, 512), 0);
    }

    #[test]
    fn average_throughput_cases() {
        assert!((average_throughput(1_997_824, 100.0).unwrap() - 159.82592).abs() < 1e-9);
        assert!((average_throughput(512, 1.0).unwrap() - 4.096).abs() < 1e-12);
        assert_eq!(average_throughput(512, 0.0), Err(MetricsError::EmptyWindow));
    }

    #[test]
    fn ratio_cases() {
        assert_eq!(nrl(100, 50), Some(2.0));
        assert_eq!(nrl(0, 10), Some(0.0));
        assert_eq!(nrl(5, 0), None);
        assert_eq!(route_cost(0, 512_000), Some(0.0));
        assert!((route_cost(5120, 512_000).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(hops_per_delivery(20, 10), Some(3.0));
        assert_eq!(hops_per_delivery(5, 10), Some(1.5));
        assert_eq!(pdr(10, 10), Some(100.0));
        assert_eq!(pdr(0, 0), None);
    }

    #[test]
    fn jitter_is_signed_and_per_flow() {
        let d = |id, flow, s: f64, r: f64| Delivery { packet_id: id, flow_id: Some(flow), sent: s, received: r };
        let ds = vec![d(1, 0, 0.0, 0.2), d(2, 1, 0.1, 0.4), d(3, 0, 1.0, 1.5), d(4, 0, 2.0, 2.2)];
        let j = jitter_series(&ds);
        assert_eq!(j.len(), 2);
        assert!((j[0].1 - 0.3).abs() < 1e-12);
        assert!((j[1].1 + 0.3).abs() < 1e-12);
        let constant = vec![d(1, 0, 0.0, 0.2), d(2, 0, 1.0, 1.2), d(3, 0, 2.0, 2.2)];
        assert!(jitter_series(&constant).iter().all(|p| p.1.abs() < 1e-12));
    }

    #[test]
    fn analysis_of_a_small_trace() {
        let records = vec![
            sent(1.0, 1, 0),
            rec(1.1, TraceEvent::Forwarded, DropReason::None, Layer::Routing, PacketKind::Cbr, 1, Some(0)),
            recv(1.2, 1, 0),
            sent(2.0, 2, 0),
            rec(2.0, TraceEvent::Dropped, DropReason::Ifq, Layer::Mac, PacketKind::Cbr, 2, Some(0)),
            rec(0.5, TraceEvent::Sent, DropReason::None, Layer::Mac, PacketKind::Control, 3, None),
            rec(0.5, TraceEvent::Received, DropReason::None, Layer::Mac, PacketKind::Control, 3, None),
        ];
        let m = analyze(&records, PacketKind::Cbr).unwrap();
        assert_eq!((m.sent, m.received, m.dropped), (2, 1, 1));
        assert_eq!(m.dropped_by_reason[&DropReason::Ifq], 1);
        assert_eq!(m.pdr, Some(50.0));
        assert_eq!(m.pdr.unwrap() + m.drop_pct.unwrap(), 100.0);
        assert_eq!(m.nrl, Some(1.0));
        assert_eq!(m.mean_hop, Some(2.0));
        assert!((m.delay[0].1 - 0.2).abs() < 1e-9);
        // Window: first send 1.0 to last receive 1.2.
        assert!((m.avg_throughput.unwrap() - 512.0 * 8.0 / 0.2 / 1000.0).abs() < 1e-6);
    }

    #[test]
    fn missing_fate_is_corruption() {
        assert!(matches!(analyze(&[sent(1.0, 1, 0)], PacketKind::Cbr), Err(MetricsError::Corrupt(_))));
        assert!(matches!(analyze(&[recv(1.0, 1, 0)], PacketKind::Cbr), Err(MetricsError::Corrupt(_))));
    }

    #[test]
    fn no_deliveries_gives_absent_ratios() {
        let records = vec![
            sent(1.0, 1, 0),
            rec(1.0, TraceEvent::Dropped, DropReason::NoRoute, Layer::Routing, PacketKind::Cbr, 1, Some(0)),
        ];
        let m = analyze(&records, PacketKind::Cbr).unwrap();
        assert_eq!(m.pdr, Some(0.0));
        assert_eq!(m.nrl, None);
        assert_eq!(m.mean_hop, None);
        assert_eq!(m.avg_throughput, None);
        assert!(m.delay.is_empty() && m.jitter.is_empty());
    }
}
