use std::collections::HashMap;
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NetsimError;
use crate::wire::MacAddr;

pub type NodeId = usize;
pub type PortId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Host,
    Switch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub role: Role,
    pub ip: Ipv4Addr,
    pub mac: MacAddr,
    pub n_ports: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub node: NodeId,
    pub port: PortId,
}

/// Per-link physical parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkParams {
    pub bandwidth_bps: f64,
    pub prop_delay_s: f64,
    pub loss_rate: f64,
    pub queue_pkts: usize,
    pub ecn_threshold_pkts: usize,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            bandwidth_bps: 100e9,
            prop_delay_s: 1e-6,
            loss_rate: 0.0,
            queue_pkts: 256,
            ecn_threshold_pkts: 64,
        }
    }
}

impl LinkParams {
    fn validate(&self) -> Result<(), NetsimError> {
        let bad = |what: &str| Err(NetsimError::InvalidParameter(what.to_string()));
        if !(self.bandwidth_bps.is_finite() && self.bandwidth_bps > 0.0) {
            return bad("bandwidth_bps must be positive");
        }
        if !(self.prop_delay_s.is_finite() && self.prop_delay_s >= 0.0) {
            return bad("prop_delay_s must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return bad("loss_rate must lie in [0, 1]");
        }
        if self.queue_pkts == 0 {
            return bad("queue_pkts must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub a: Endpoint,
    pub b: Endpoint,
    pub params: LinkParams,
}

impl Link {
    /// The far end as seen from `from`, plus the direction index (0 = a→b).
    pub fn other(&self, from: Endpoint) -> Option<(Endpoint, usize)> {
        if from == self.a {
            Some((self.b, 0))
        } else if from == self.b {
            Some((self.a, 1))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
    port_link: Vec<Vec<Option<usize>>>,
    hosts: Vec<NodeId>,
}

impl Topology {
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    /// Host node ids in creation order; scenario files refer to hosts by
    /// their position in this list.
    pub fn hosts(&self) -> &[NodeId] {
        &self.hosts
    }

    pub fn host(&self, index: usize) -> Option<NodeId> {
        self.hosts.get(index).copied()
    }

    pub fn switches(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .filter(|n| n.role == Role::Switch)
            .map(|n| n.id)
    }

    pub fn n_switches(&self) -> usize {
        self.switches().count()
    }

    pub fn link_at(&self, node: NodeId, port: PortId) -> Option<usize> {
        self.port_link.get(node)?.get(port).copied().flatten()
    }

    pub fn peer(&self, node: NodeId, port: PortId) -> Option<Endpoint> {
        let link = &self.links[self.link_at(node, port)?];
        link.other(Endpoint { node, port }).map(|(e, _)| e)
    }

    pub fn node_by_ip(&self, ip: Ipv4Addr) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.ip == ip).map(|n| n.id)
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.name == name).map(|n| n.id)
    }

    /// Overrides the loss rate of every link.
    pub fn set_loss_rate(&mut self, rate: f64) {
        for l in &mut self.links {
            l.params.loss_rate = rate;
        }
    }

    /// Loads a topology description from a TOML file.
    pub fn from_file(path: &Path) -> Result<Topology, NetsimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NetsimError::InvalidParameter(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Topology, NetsimError> {
        let file: TopologyFile =
            toml::from_str(text).map_err(|e| NetsimError::InvalidParameter(e.to_string()))?;
        file.build()
    }
}

/// Incremental topology constructor with deterministic addressing.
///
/// Hosts get `10.0.0.0 + (host index + 1)`, switches `10.255.0.0 + (switch
/// index + 1)`, and every node the MAC `02:00:` followed by its node id + 1.
#[derive(Debug, Default)]
pub struct TopologyBuilder {
    nodes: Vec<Node>,
    links: Vec<Link>,
    next_port: Vec<PortId>,
    defaults: LinkParams,
    n_hosts: u32,
    n_switches: u32,
}

impl TopologyBuilder {
    pub fn new(defaults: LinkParams) -> Self {
        Self {
            defaults,
            ..Default::default()
        }
    }

    pub fn add_host(&mut self, name: impl Into<String>) -> NodeId {
        self.n_hosts += 1;
        let ip = Ipv4Addr::from(u32::from(Ipv4Addr::new(10, 0, 0, 0)) + self.n_hosts);
        self.add_node(name.into(), Role::Host, ip, 1)
    }

    pub fn add_switch(&mut self, name: impl Into<String>, n_ports: usize) -> NodeId {
        self.n_switches += 1;
        let ip = Ipv4Addr::from(u32::from(Ipv4Addr::new(10, 255, 0, 0)) + self.n_switches);
        self.add_node(name.into(), Role::Switch, ip, n_ports)
    }

    fn add_node(&mut self, name: String, role: Role, ip: Ipv4Addr, n_ports: usize) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            name,
            role,
            ip,
            mac: MacAddr::from_index(id as u32 + 1),
            n_ports,
        });
        self.next_port.push(0);
        id
    }

    /// Overrides the address assigned to `node`.
    pub fn set_ip(&mut self, node: NodeId, ip: Ipv4Addr) {
        self.nodes[node].ip = ip;
    }

    /// Connects the next free port of `a` to the next free port of `b`.
    pub fn connect(&mut self, a: NodeId, b: NodeId) -> (PortId, PortId) {
        let (pa, pb) = (self.next_port[a], self.next_port[b]);
        self.connect_ports(a, pa, b, pb, self.defaults);
        (pa, pb)
    }

    pub fn connect_ports(&mut self, a: NodeId, pa: PortId, b: NodeId, pb: PortId, params: LinkParams) {
        self.next_port[a] = self.next_port[a].max(pa + 1);
        self.next_port[b] = self.next_port[b].max(pb + 1);
        self.links.push(Link {
            a: Endpoint { node: a, port: pa },
            b: Endpoint { node: b, port: pb },
            params,
        });
    }

    pub fn link_params_mut(&mut self, link: usize) -> &mut LinkParams {
        &mut self.links[link].params
    }

    pub fn build(self) -> Result<Topology, NetsimError> {
        let mut port_link: Vec<Vec<Option<usize>>> =
            self.nodes.iter().map(|n| vec![None; n.n_ports]).collect();
        let mut ips = HashMap::new();
        for n in &self.nodes {
            if let Some(prev) = ips.insert(n.ip, n.id) {
                return Err(NetsimError::InvalidParameter(format!(
                    "nodes {} and {} share address {}",
                    self.nodes[prev].name, n.name, n.ip
                )));
            }
        }
        for (i, l) in self.links.iter().enumerate() {
            l.params.validate()?;
            if l.a.node == l.b.node {
                return Err(NetsimError::InvalidParameter(format!("link {i} is a self-loop")));
            }
            for e in [l.a, l.b] {
                let node = self.nodes.get(e.node).ok_or_else(|| {
                    NetsimError::InvalidParameter(format!("link {i} references missing node {}", e.node))
                })?;
                let slot = port_link[e.node].get_mut(e.port).ok_or_else(|| {
                    NetsimError::InvalidParameter(format!(
                        "link {i} uses port {} of {} which has {} ports",
                        e.port, node.name, node.n_ports
                    ))
                })?;
                if slot.is_some() {
                    return Err(NetsimError::InvalidParameter(format!(
                        "port {} of {} is used by more than one link",
                        e.port, node.name
                    )));
                }
                *slot = Some(i);
            }
        }
        let hosts = self
            .nodes
            .iter()
            .filter(|n| n.role == Role::Host)
            .map(|n| n.id)
            .collect();
        Ok(Topology {
            nodes: self.nodes,
            links: self.links,
            port_link,
            hosts,
        })
    }
}

fn positive(what: &str, v: usize) -> Result<(), NetsimError> {
    if v == 0 {
        Err(NetsimError::InvalidParameter(format!("{what} must be positive")))
    } else {
        Ok(())
    }
}

/// One switch with `n_hosts` hosts; host `i` sits on switch port `i`.
pub fn build_star(n_hosts: usize, params: LinkParams) -> Result<Topology, NetsimError> {
    positive("n_hosts", n_hosts)?;
    let mut b = TopologyBuilder::new(params);
    let sw = b.add_switch("sw0", n_hosts);
    for i in 0..n_hosts {
        let h = b.add_host(format!("h{i}"));
        b.connect_ports(sw, i, h, 0, params);
    }
    b.build()
}

/// `leaves` leaf switches with `hosts_per_leaf` hosts each, fully meshed to
/// `spines` spine switches. Leaf ports `0..h` face hosts, `h..h+s` spines.
pub fn build_leaf_spine(
    leaves: usize,
    spines: usize,
    hosts_per_leaf: usize,
    params: LinkParams,
) -> Result<Topology, NetsimError> {
    positive("leaves", leaves)?;
    positive("spines", spines)?;
    positive("hosts_per_leaf", hosts_per_leaf)?;
    let mut b = TopologyBuilder::new(params);
    let leaf_ids: Vec<_> = (0..leaves)
        .map(|i| b.add_switch(format!("leaf{i}"), hosts_per_leaf + spines))
        .collect();
    let spine_ids: Vec<_> = (0..spines)
        .map(|i| b.add_switch(format!("spine{i}"), leaves))
        .collect();
    for (li, &leaf) in leaf_ids.iter().enumerate() {
        for j in 0..hosts_per_leaf {
            let h = b.add_host(format!("h{}", li * hosts_per_leaf + j));
            b.connect_ports(leaf, j, h, 0, params);
        }
    }
    for (li, &leaf) in leaf_ids.iter().enumerate() {
        for (si, &spine) in spine_ids.iter().enumerate() {
            b.connect_ports(leaf, hosts_per_leaf + si, spine, li, params);
        }
    }
    b.build()
}

/// Three-layer k-ary fat-tree: k pods of k/2 edge and k/2 aggregation
/// switches, (k/2)^2 cores, k^3/4 hosts.
///
/// Edge ports `0..k/2` face hosts and `k/2..k` face aggregation switch
/// `port - k/2` of the same pod. Aggregation ports `0..k/2` face edge
/// switches, and port `k/2 + m` of aggregation switch `j` faces core
/// `j * k/2 + m`. Core port `p` faces pod `p`.
pub fn build_fat_tree(k: usize, params: LinkParams) -> Result<Topology, NetsimError> {
    if k < 2 || !k.is_multiple_of(2) {
        return Err(NetsimError::InvalidParameter(format!(
            "fat-tree arity must be even and at least 2, got {k}"
        )));
    }
    let half = k / 2;
    let mut b = TopologyBuilder::new(params);
    let mut edges = Vec::new();
    let mut aggs = Vec::new();
    for pod in 0..k {
        edges.push(
            (0..half)
                .map(|e| b.add_switch(format!("edge{pod}_{e}"), k))
                .collect::<Vec<_>>(),
        );
    }
    for pod in 0..k {
        aggs.push(
            (0..half)
                .map(|a| b.add_switch(format!("agg{pod}_{a}"), k))
                .collect::<Vec<_>>(),
        );
    }
    let cores: Vec<_> = (0..half * half)
        .map(|c| b.add_switch(format!("core{c}"), k))
        .collect();

    let mut host_index = 0;
    for pod_edges in &edges {
        for &edge in pod_edges {
            for slot in 0..half {
                let h = b.add_host(format!("h{host_index}"));
                host_index += 1;
                b.connect_ports(edge, slot, h, 0, params);
            }
        }
    }
    for pod in 0..k {
        for (ei, &edge) in edges[pod].iter().enumerate() {
            for (ai, &agg) in aggs[pod].iter().enumerate() {
                b.connect_ports(edge, half + ai, agg, ei, params);
            }
        }
        for (ai, &agg) in aggs[pod].iter().enumerate() {
            for m in 0..half {
                b.connect_ports(agg, half + m, cores[ai * half + m], pod, params);
            }
        }
    }
    b.build()
}

/// On-disk topology schema.
///
/// ```toml
/// [defaults]
/// bandwidth_bps = 100e9
///
/// [[nodes]]
/// name = "sw0"
/// role = "switch"
/// ports = 2
///
/// [[nodes]]
/// name = "h0"
/// role = "host"
///
/// [[links]]
/// a = "h0"        # "name" uses the next free port, "name:port" pins it
/// b = "sw0:0"
/// prop_delay_s = 2e-6
/// ```
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    #[serde(default)]
    pub defaults: LinkParams,
    pub nodes: Vec<NodeDecl>,
    #[serde(default)]
    pub links: Vec<LinkDecl>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDecl {
    pub name: String,
    pub role: Role,
    #[serde(default)]
    pub ports: Option<usize>,
    #[serde(default)]
    pub ip: Option<Ipv4Addr>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDecl {
    pub a: String,
    pub b: String,
    pub bandwidth_bps: Option<f64>,
    pub prop_delay_s: Option<f64>,
    pub loss_rate: Option<f64>,
    pub queue_pkts: Option<usize>,
    pub ecn_threshold_pkts: Option<usize>,
}

impl TopologyFile {
    pub fn build(&self) -> Result<Topology, NetsimError> {
        let mut b = TopologyBuilder::new(self.defaults);
        let mut by_name = HashMap::new();
        for n in &self.nodes {
            let id = match n.role {
                Role::Host => {
                    if n.ports.is_some_and(|p| p != 1) {
                        return Err(NetsimError::InvalidParameter(format!(
                            "host {} must have exactly one port",
                            n.name
                        )));
                    }
                    b.add_host(n.name.clone())
                }
                Role::Switch => {
                    let ports = n.ports.ok_or_else(|| {
                        NetsimError::InvalidParameter(format!("switch {} needs a port count", n.name))
                    })?;
                    b.add_switch(n.name.clone(), ports)
                }
            };
            if let Some(ip) = n.ip {
                b.set_ip(id, ip);
            }
            if by_name.insert(n.name.clone(), id).is_some() {
                return Err(NetsimError::InvalidParameter(format!("duplicate node name {}", n.name)));
            }
        }
        for l in &self.links {
            let (a, pa) = resolve(&by_name, &l.a, &b)?;
            let (bn, pb) = resolve(&by_name, &l.b, &b)?;
            let mut params = self.defaults;
            if let Some(v) = l.bandwidth_bps {
                params.bandwidth_bps = v;
            }
            if let Some(v) = l.prop_delay_s {
                params.prop_delay_s = v;
            }
            if let Some(v) = l.loss_rate {
                params.loss_rate = v;
            }
            if let Some(v) = l.queue_pkts {
                params.queue_pkts = v;
            }
            if let Some(v) = l.ecn_threshold_pkts {
                params.ecn_threshold_pkts = v;
            }
            b.connect_ports(a, pa, bn, pb, params);
        }
        b.build()
    }
}

fn resolve(
    by_name: &HashMap<String, NodeId>,
    spec: &str,
    b: &TopologyBuilder,
) -> Result<(NodeId, PortId), NetsimError> {
    let (name, port) = match spec.split_once(':') {
        Some((n, p)) => {
            let port = p
                .parse::<usize>()
                .map_err(|_| NetsimError::InvalidParameter(format!("bad port in endpoint {spec}")))?;
            (n, Some(port))
        }
        None => (spec, None),
    };
    let id = *by_name
        .get(name)
        .ok_or_else(|| NetsimError::InvalidParameter(format!("unknown node {name}")))?;
    Ok((id, port.unwrap_or(b.next_port[id])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d() -> LinkParams {
        LinkParams::default()
    }

    #[test]
    fn star_counts() {
        let t = build_star(4, d()).unwrap();
        assert_eq!(t.hosts().len(), 4);
        assert_eq!(t.n_switches(), 1);
        assert_eq!(t.links.len(), 4);
        assert_eq!(t.node(t.host(0).unwrap()).ip, Ipv4Addr::new(10, 0, 0, 1));
    }

    #[test]
    fn leaf_spine_counts() {
        let t = build_leaf_spine(2, 2, 2, d()).unwrap();
        assert_eq!(t.hosts().len(), 4);
        assert_eq!(t.n_switches(), 4);
        assert_eq!(t.links.len(), 8);
    }

    #[test]
    fn fat_tree_counts() {
        for k in [2, 4, 6] {
            let t = build_fat_tree(k, d()).unwrap();
            assert_eq!(t.hosts().len(), k * k * k / 4);
            assert_eq!(t.n_switches(), 5 * k * k / 4);
            assert_eq!(t.links.len(), 3 * k * k * k / 4);
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(build_fat_tree(3, d()).is_err());
        assert!(build_star(0, d()).is_err());
        assert!(build_leaf_spine(1, 0, 1, d()).is_err());
    }

    #[test]
    fn every_port_has_one_link() {
        let t = build_fat_tree(4, d()).unwrap();
        for n in &t.nodes {
            for p in 0..n.n_ports {
                let peer = t.peer(n.id, p).expect("all fat-tree ports are wired");
                assert_eq!(t.peer(peer.node, peer.port), Some(Endpoint { node: n.id, port: p }));
            }
        }
    }

    #[test]
    fn file_schema() {
        let t = Topology::from_toml(
            r#"
            [defaults]
            prop_delay_s = 2e-6
            [[nodes]]
            name = "sw"
            role = "switch"
            ports = 2
            [[nodes]]
            name = "a"
            role = "host"
            [[nodes]]
            name = "b"
            role = "host"
            ip = "192.168.0.9"
            [[links]]
            a = "a"
            b = "sw:1"
            [[links]]
            a = "sw:0"
            b = "b"
            loss_rate = 0.5
            "#,
        )
        .unwrap();
        let sw = t.node_by_name("sw").unwrap();
        assert_eq!(t.peer(sw, 1).unwrap().node, t.node_by_name("a").unwrap());
        assert_eq!(t.links[1].params.loss_rate, 0.5);
        assert_eq!(t.links[0].params.prop_delay_s, 2e-6);
        assert_eq!(t.node(t.host(1).unwrap()).ip, Ipv4Addr::new(192, 168, 0, 9));
    }

    #[test]
    fn file_rejects_port_reuse() {
        let err = Topology::from_toml(
            r#"
            [[nodes]]
            name = "sw"
            role = "switch"
            ports = 1
            [[nodes]]
            name = "a"
            role = "host"
            [[nodes]]
            name = "b"
            role = "host"
            [[links]]
            a = "a"
            b = "sw:0"
            [[links]]
            a = "b"
            b = "sw:0"
            "#,
        );
        assert!(err.is_err());
    }
}
