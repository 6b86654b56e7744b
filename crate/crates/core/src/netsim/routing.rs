use std::collections::{BTreeMap, VecDeque};
use std::net::Ipv4Addr;

use super::topology::{NodeId, PortId, Role, Topology};

/// Static shortest-path unicast routes toward every host, with ECMP.
#[derive(Debug, Clone)]
pub struct Routes {
    /// Indexed by node id; empty for hosts.
    tables: Vec<BTreeMap<Ipv4Addr, Vec<PortId>>>,
    /// Per-switch hash salt, one hash domain per switch.
    salts: Vec<u64>,
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Routes {
    pub fn compute(topo: &Topology, seed: u64) -> Routes {
        let n = topo.nodes.len();
        let mut tables = vec![BTreeMap::new(); n];
        for &h in topo.hosts() {
            let dist = distances_from(topo, h);
            let ip = topo.node(h).ip;
            for node in topo.switches() {
                let Some(d) = dist[node] else { continue };
                let ports: Vec<PortId> = (0..topo.node(node).n_ports)
                    .filter(|&p| {
                        topo.peer(node, p).is_some_and(|peer| {
                            peer.node == h
                                || (topo.node(peer.node).role == Role::Switch
                                    && dist[peer.node].is_some_and(|pd| pd + 1 == d))
                        })
                    })
                    .collect();
                if !ports.is_empty() {
                    tables[node].insert(ip, ports);
                }
            }
        }
        let salt_base = mix64(seed ^ 0x6563_6D70);
        let salts = (0..n).map(|i| mix64(salt_base ^ i as u64)).collect();
        Routes { tables, salts }
    }

    /// All equal-cost next-hop ports from `switch` toward `ip`.
    pub fn candidates(&self, switch: NodeId, ip: Ipv4Addr) -> &[PortId] {
        self.tables
            .get(switch)
            .and_then(|t| t.get(&ip))
            .map_or(&[], Vec::as_slice)
    }

    /// Picks one candidate by hashing `flow` in this switch's hash domain.
    pub fn select(&self, switch: NodeId, ip: Ipv4Addr, flow: u64) -> Option<PortId> {
        let c = self.candidates(switch, ip);
        if c.is_empty() {
            return None;
        }
        let h = mix64(self.salts[switch] ^ flow);
        Some(c[(h % c.len() as u64) as usize])
    }
}

/// Hop counts from host `src`; other hosts are never used as transit.
fn distances_from(topo: &Topology, src: NodeId) -> Vec<Option<usize>> {
    let mut dist = vec![None; topo.nodes.len()];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        if u != src && topo.node(u).role == Role::Host {
            continue;
        }
        let du = dist[u].expect("queued nodes have a distance");
        for p in 0..topo.node(u).n_ports {
            if let Some(peer) = topo.peer(u, p) {
                if dist[peer.node].is_none() {
                    dist[peer.node] = Some(du + 1);
                    queue.push_back(peer.node);
                }
            }
        }
    }
    dist
}

/// Flow key used for ECMP hashing.
pub fn flow_key(src: Ipv4Addr, dst: Ipv4Addr, qpn: u32) -> u64 {
    (u64::from(u32::from(src)) << 32 | u64::from(u32::from(dst))) ^ (u64::from(qpn) << 17)
}
