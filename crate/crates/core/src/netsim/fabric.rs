use std::collections::VecDeque;
use std::io::Write;
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::routing::mix64;
use super::topology::{Endpoint, NodeId, PortId, Role, Topology};
use super::SimTime;
use crate::wire::{Ecn, Packet, PacketKind, Psn};

/// Deterministic drop of matching packets, used to stage specific loss
/// patterns. Fields left `None` match anything.
#[derive(Debug, Clone, PartialEq)]
pub struct DropRule {
    pub from: Option<NodeId>,
    pub port: Option<PortId>,
    pub kind: Option<PacketKind>,
    pub psn: Option<Psn>,
    pub dst_ip: Option<Ipv4Addr>,
    /// Number of further matches to drop.
    pub remaining: u32,
}

impl DropRule {
    pub fn once(from: NodeId, kind: PacketKind, psn: Psn) -> Self {
        Self {
            from: Some(from),
            port: None,
            kind: Some(kind),
            psn: Some(psn),
            dst_ip: None,
            remaining: 1,
        }
    }

    fn matches(&self, from: Endpoint, p: &Packet) -> bool {
        self.remaining > 0
            && self.from.is_none_or(|n| n == from.node)
            && self.port.is_none_or(|q| q == from.port)
            && self.kind.is_none_or(|k| k == p.kind())
            && self.psn.is_none_or(|s| p.psn() == Some(s))
            && self.dst_ip.is_none_or(|ip| ip == p.ip.dst)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FabricStats {
    pub injected: u64,
    pub delivered: u64,
    pub dropped_loss: u64,
    pub dropped_queue: u64,
    pub ecn_marked: u64,
    pub in_flight: u64,
    pub bytes_tx: u64,
}

impl FabricStats {
    /// `injected = delivered + dropped + in flight`.
    pub fn conserved(&self) -> bool {
        self.injected == self.delivered + self.dropped_loss + self.dropped_queue + self.in_flight
    }
}

#[derive(Debug)]
pub enum Transmit {
    Arrive {
        at: SimTime,
        to: Endpoint,
        packet: Packet,
    },
    Lost,
    QueueFull,
    Unconnected,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub t: f64,
    pub ev: &'static str,
    pub node: NodeId,
    pub port: PortId,
    pub kind: &'static str,
    pub psn: Option<u32>,
    pub dst: String,
    /// Member addresses listed by an envelope.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<Ipv4Addr>,
}

#[derive(Debug, Default, Clone)]
struct Direction {
    busy_until: f64,
    /// Departure times of packets still occupying the queue.
    departures: VecDeque<f64>,
}

impl Direction {
    fn occupancy(&mut self, now: f64) -> usize {
        while self.departures.front().is_some_and(|&d| d <= now) {
            self.departures.pop_front();
        }
        self.departures.len()
    }
}

#[derive(Debug)]
struct LinkState {
    dirs: [Direction; 2],
    rng: ChaCha8Rng,
}

/// Egress queues, serialization, propagation, loss and ECN for every link.
#[derive(Debug)]
pub struct Fabric {
    links: Vec<LinkState>,
    pub proc_delay_s: f64,
    pub stats: FabricStats,
    rules: Vec<DropRule>,
    trace: Option<Vec<TraceRecord>>,
}

fn kind_name(k: PacketKind) -> &'static str {
    match k {
        PacketKind::Data => "data",
        PacketKind::Ack => "ack",
        PacketKind::Nack => "nack",
        PacketKind::Cnp => "cnp",
        PacketKind::Envelope => "envelope",
    }
}

impl Fabric {
    /// One loss generator per link, each seeded from `(seed, link index)`.
    pub fn new(topo: &Topology, seed: u64, proc_delay_s: f64) -> Self {
        let base = mix64(seed ^ 0x6C6F_7373);
        let links = (0..topo.links.len())
            .map(|i| LinkState {
                dirs: Default::default(),
                rng: ChaCha8Rng::seed_from_u64(mix64(base ^ i as u64)),
            })
            .collect();
        Self {
            links,
            proc_delay_s,
            stats: FabricStats::default(),
            rules: Vec::new(),
            trace: None,
        }
    }

    pub fn add_drop_rule(&mut self, rule: DropRule) {
        self.rules.push(rule);
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn write_trace<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in self.trace() {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn record(&mut self, now: SimTime, ev: &'static str, at: Endpoint, p: &Packet) {
        if let Some(t) = &mut self.trace {
            t.push(TraceRecord {
                t: now.as_secs(),
                ev,
                node: at.node,
                port: at.port,
                kind: kind_name(p.kind()),
                psn: p.psn().map(Psn::value),
                dst: p.ip.dst.to_string(),
                members: p
                    .as_envelope()
                    .map(|e| e.entries.iter().map(|m| m.ip).collect())
                    .unwrap_or_default(),
            });
        }
    }

    /// Time at which the egress of `(node, port)` finishes its current backlog.
    pub fn busy_until(&self, topo: &Topology, node: NodeId, port: PortId) -> SimTime {
        let Some(li) = topo.link_at(node, port) else {
            return SimTime::ZERO;
        };
        let (_, dir) = topo.links[li]
            .other(Endpoint { node, port })
            .expect("link_at is consistent");
        SimTime::from_secs(self.links[li].dirs[dir].busy_until)
    }

    /// Enqueues `packet` on the egress of `from`.
    pub fn transmit(&mut self, topo: &Topology, now: SimTime, from: Endpoint, mut packet: Packet) -> Transmit {
        let Some(li) = topo.link_at(from.node, from.port) else {
            return Transmit::Unconnected;
        };
        let link = &topo.links[li];
        let (to, d) = link.other(from).expect("link_at is consistent");
        let params = link.params;
        self.stats.injected += 1;
        let t = now.as_secs();

        let state = &mut self.links[li];
        let dir = &mut state.dirs[d];
        let occupancy = dir.occupancy(t);
        if occupancy >= params.queue_pkts {
            self.stats.dropped_queue += 1;
            self.record(now, "drop_queue", from, &packet);
            return Transmit::QueueFull;
        }
        if occupancy > params.ecn_threshold_pkts && packet.ip.ecn.is_capable() {
            packet.ip.ecn = Ecn::Ce;
            self.stats.ecn_marked += 1;
        }
        let bytes = packet.wire_len();
        let start = dir.busy_until.max(t);
        let finish = start + bytes as f64 * 8.0 / params.bandwidth_bps;
        dir.busy_until = finish;
        dir.departures.push_back(finish);
        self.stats.bytes_tx += bytes as u64;

        let lost_random = params.loss_rate > 0.0 && state.rng.gen::<f64>() < params.loss_rate;
        let lost_rule = match self.rules.iter_mut().find(|r| r.matches(from, &packet)) {
            Some(rule) => {
                rule.remaining -= 1;
                true
            }
            None => false,
        };
        if lost_random || lost_rule {
            self.stats.dropped_loss += 1;
            log::debug!(
                "loss on link {li} from node {} port {}: {:?} psn {:?}",
                from.node,
                from.port,
                packet.kind(),
                packet.psn()
            );
            self.record(now, "drop_loss", from, &packet);
            return Transmit::Lost;
        }

        let mut at = finish + params.prop_delay_s;
        if topo.node(to.node).role == Role::Switch {
            at += self.proc_delay_s;
        }
        self.stats.in_flight += 1;
        self.record(now, "tx", from, &packet);
        Transmit::Arrive {
            at: SimTime::from_secs(at),
            to,
            packet,
        }
    }

    /// Marks one scheduled arrival as handed to its node.
    pub fn delivered(&mut self, now: SimTime, at: Endpoint, p: &Packet) {
        self.stats.in_flight -= 1;
        self.stats.delivered += 1;
        self.record(now, "rx", at, p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::topology::{build_star, LinkParams};
    use crate::wire::*;
    use bytes::Bytes;

    fn data(len: usize, ecn: Ecn) -> Packet {
        Packet {
            eth: EthHeader {
                dst_mac: MacAddr::ZERO,
                src_mac: MacAddr::ZERO,
            },
            ip: IpHeader {
                src: Ipv4Addr::new(10, 0, 0, 1),
                dst: Ipv4Addr::new(10, 0, 0, 2),
                ecn,
            },
            udp: UdpHeader {
                src_port: 1,
                dst_port: ROCE_UDP_PORT,
            },
            body: Body::Data(DataBody {
                op: DataOp::Send,
                bth: Bth::new(Qpn::new(2), Psn::ZERO),
                payload: Bytes::from(vec![0u8; len]),
            }),
        }
    }

    fn host_ep(t: &Topology) -> Endpoint {
        Endpoint {
            node: t.host(0).unwrap(),
            port: 0,
        }
    }

    #[test]
    fn serialization_plus_propagation() {
        let t = build_star(2, LinkParams::default()).unwrap();
        let mut f = Fabric::new(&t, 1, 0.0);
        let p = data(1500 - 54, Ecn::NotEct);
        assert_eq!(p.wire_len(), 1500);
        let sw = t.switches().next().unwrap();
        // switch egress toward host 1, which adds no processing delay
        match f.transmit(&t, SimTime::ZERO, Endpoint { node: sw, port: 1 }, p) {
            Transmit::Arrive { at, .. } => assert!((at.as_secs() - (0.12e-6 + 1e-6)).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loss_extremes() {
        let mut t = build_star(2, LinkParams::default()).unwrap();
        let ep = host_ep(&t);
        let mut f = Fabric::new(&t, 1, 0.0);
        for i in 0..100 {
            let now = SimTime::from_micros(i as f64);
            assert!(matches!(f.transmit(&t, now, ep, data(10, Ecn::NotEct)), Transmit::Arrive { .. }));
        }
        t.set_loss_rate(1.0);
        let mut f = Fabric::new(&t, 1, 0.0);
        for i in 0..100 {
            let now = SimTime::from_micros(i as f64);
            assert!(matches!(f.transmit(&t, now, ep, data(10, Ecn::NotEct)), Transmit::Lost));
        }
        assert!(f.stats.conserved());
    }

    #[test]
    fn queue_overflow_and_ecn() {
        let params = LinkParams {
            queue_pkts: 8,
            ecn_threshold_pkts: 2,
            ..LinkParams::default()
        };
        let t = build_star(2, params).unwrap();
        let ep = host_ep(&t);
        let mut f = Fabric::new(&t, 1, 0.0);
        let mut marked = 0;
        let mut full = 0;
        for _ in 0..10 {
            match f.transmit(&t, SimTime::ZERO, ep, data(1000, Ecn::Ect0)) {
                Transmit::Arrive { packet, .. } => marked += usize::from(packet.ip.ecn == Ecn::Ce),
                Transmit::QueueFull => full += 1,
                other => panic!("{other:?}"),
            }
        }
        // occupancies 0..=7 accepted; 3..=7 exceed K = 2
        assert_eq!(marked, 5);
        assert_eq!(full, 2);
        assert!(f.stats.conserved());
    }

    #[test]
    fn fifo_per_link() {
        let t = build_star(2, LinkParams::default()).unwrap();
        let ep = host_ep(&t);
        let mut f = Fabric::new(&t, 1, 300e-9);
        let mut last = 0.0;
        for len in [1400, 10, 700, 0, 1400] {
            if let Transmit::Arrive { at, .. } = f.transmit(&t, SimTime::ZERO, ep, data(len, Ecn::NotEct)) {
                assert!(at.as_secs() > last);
                last = at.as_secs();
            }
        }
    }

    #[test]
    fn drop_rule_fires_once() {
        let t = build_star(2, LinkParams::default()).unwrap();
        let ep = host_ep(&t);
        let mut f = Fabric::new(&t, 1, 0.0);
        f.add_drop_rule(DropRule::once(ep.node, PacketKind::Data, Psn::ZERO));
        assert!(matches!(f.transmit(&t, SimTime::ZERO, ep, data(1, Ecn::NotEct)), Transmit::Lost));
        assert!(matches!(f.transmit(&t, SimTime::ZERO, ep, data(1, Ecn::NotEct)), Transmit::Arrive { .. }));
    }
}
