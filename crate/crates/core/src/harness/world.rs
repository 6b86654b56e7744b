use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::host::{Completion, GroupMembership, Host, HostConfig, Timer, TxPoll};
use crate::netsim::{
    flow_key, Endpoint, Fabric, NodeId, PortId, Role, Routes, Scheduler, SimTime, Topology,
    Transmit,
};
use crate::switch::{PortMap, SwitchEvent, SwitchTable};
use crate::wire::{Body, EnvelopeEntry, GroupIp, MacAddr, Packet, Psn, Qpn};

/// Simulation knobs that are not part of the topology or the hosts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Added to every arrival at a switch.
    pub proc_delay_s: f64,
    /// Period of the congestion-counter aging at switches. Scenarios
    /// replace the default with four base RTTs unless set explicitly.
    pub age_interval_s: f64,
    /// Runs that have not finished by this simulated time are deadlocked.
    pub max_sim_time_s: f64,
    /// Host receive-to-transmit delay of the ring overlay baseline.
    pub hop_delay_s: f64,
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            proc_delay_s: 300e-9,
            age_interval_s: 50e-6,
            max_sim_time_s: 1.0,
            hop_delay_s: 2e-6,
            trace: false,
        }
    }
}

#[derive(Debug)]
pub enum Event {
    Arrive { to: Endpoint, packet: Packet },
    HostTx { host: usize, token: u64 },
    HostTimer { host: usize, timer: Timer },
    Age,
    /// Opaque callback into the running driver.
    Hook(u64),
}

/// Reacts to completions and hooks while [`World::run`] drives the clock.
pub trait Driver {
    fn on_completion(&mut self, w: &mut World, host: usize, c: &Completion) -> Result<(), HarnessError>;

    fn on_hook(&mut self, _w: &mut World, _tag: u64) -> Result<(), HarnessError> {
        Ok(())
    }

    fn done(&self, w: &World) -> bool;
}

/// A registered (or registering) multicast group.
#[derive(Debug, Clone)]
pub struct GroupHandle {
    pub group: GroupIp,
    pub master: usize,
    /// Host indices in registration order.
    pub members: Vec<usize>,
    /// Host index to the index of its group QP.
    pub qps: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LoggedSwitchEvent {
    pub t: f64,
    pub switch: String,
    #[serde(flatten)]
    pub event: SwitchEvent,
}

struct PortView<'a> {
    topo: &'a Topology,
    routes: &'a Routes,
    node: NodeId,
    attached: &'a BTreeMap<Ipv4Addr, (PortId, MacAddr)>,
}

impl PortMap for PortView<'_> {
    fn candidates(&self, ip: Ipv4Addr) -> Vec<PortId> {
        self.routes.candidates(self.node, ip).to_vec()
    }

    fn attached(&self, ip: Ipv4Addr) -> Option<(PortId, MacAddr)> {
        self.attached.get(&ip).copied()
    }

    fn faces_switch(&self, port: PortId) -> bool {
        self.topo
            .peer(self.node, port)
            .is_some_and(|p| self.topo.node(p.node).role == Role::Switch)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct WorldStats {
    pub switch_errors: u64,
    pub unroutable: u64,
}

/// One simulation run: topology, fabric, hosts, switch tables and the
/// event queue.
pub struct World {
    pub topo: Topology,
    pub routes: Routes,
    pub fabric: Fabric,
    pub sched: Scheduler<Event>,
    pub hosts: Vec<Host>,
    pub switches: Vec<Option<SwitchTable>>,
    pub cfg: SimConfig,
    pub stats: WorldStats,
    pub switch_log: Vec<LoggedSwitchEvent>,
    host_of_node: Vec<Option<usize>>,
    attached: Vec<BTreeMap<Ipv4Addr, (PortId, MacAddr)>>,
    tx_token: Vec<u64>,
    tx_at: Vec<Option<SimTime>>,
    completions: Vec<(usize, Completion)>,
    ready: BTreeSet<(usize, usize)>,
    registered: BTreeSet<GroupIp>,
    aging: bool,
}

impl World {
    pub fn new(topo: Topology, seed: u64, host_cfg: &HostConfig, cfg: SimConfig) -> Self {
        let routes = Routes::compute(&topo, seed);
        let mut fabric = Fabric::new(&topo, seed, cfg.proc_delay_s);
        if cfg.trace {
            fabric.enable_trace();
        }
        let mut host_of_node = vec![None; topo.nodes.len()];
        let mut hosts = Vec::new();
        for (i, &h) in topo.hosts().iter().enumerate() {
            host_of_node[h] = Some(i);
            let n = topo.node(h);
            hosts.push(Host::new(n.ip, n.mac, host_cfg.clone()));
        }
        let mut switches = Vec::with_capacity(topo.nodes.len());
        let mut attached = Vec::with_capacity(topo.nodes.len());
        for n in &topo.nodes {
            let mut att = BTreeMap::new();
            if n.role == Role::Switch {
                switches.push(Some(SwitchTable::new(n.n_ports, n.mac)));
                for port in 0..n.n_ports {
                    if let Some(peer) = topo.peer(n.id, port) {
                        let p = topo.node(peer.node);
                        if p.role == Role::Host {
                            att.insert(p.ip, (port, p.mac));
                        }
                    }
                }
            } else {
                switches.push(None);
            }
            attached.push(att);
        }
        let n_hosts = hosts.len();
        Self {
            topo,
            routes,
            fabric,
            sched: Scheduler::new(),
            hosts,
            switches,
            cfg,
            stats: WorldStats::default(),
            switch_log: Vec::new(),
            host_of_node,
            attached,
            tx_token: vec![0; n_hosts],
            tx_at: vec![None; n_hosts],
            completions: Vec::new(),
            ready: BTreeSet::new(),
            registered: BTreeSet::new(),
            aging: false,
        }
    }

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn host_node(&self, host: usize) -> NodeId {
        self.topo.hosts()[host]
    }

    pub fn host_ip(&self, host: usize) -> Ipv4Addr {
        self.hosts[host].ip
    }

    pub fn switch_table(&self, name: &str) -> Option<&SwitchTable> {
        self.topo
            .node_by_name(name)
            .and_then(|n| self.switches[n].as_ref())
    }

    pub fn schedule_hook(&mut self, at: SimTime, tag: u64) {
        let at = at.max(self.now());
        self.sched
            .schedule(at, Event::Hook(tag))
            .expect("hook time is clamped to now");
    }

    /// Connects a unicast RC pair between two hosts and returns their QP
    /// indices.
    pub fn connect_rc(&mut self, a: usize, b: usize, initial_psn: Psn) -> (usize, usize) {
        let (ip_a, mac_a) = (self.hosts[a].ip, self.hosts[a].mac);
        let (ip_b, mac_b) = (self.hosts[b].ip, self.hosts[b].mac);
        let (qa, qpn_a) = self.hosts[a].create_qp(ip_b, Qpn::default(), mac_b, initial_psn);
        let (qb, qpn_b) = self.hosts[b].create_qp(ip_a, qpn_a, mac_a, initial_psn);
        self.hosts[a].qp_mut(qa).dest_qpn = qpn_b;
        (qa, qb)
    }

    /// Creates group QPs on every member and starts registration from
    /// `master`.
    pub fn setup_group(&mut self, group: GroupIp, master: usize, members: &[usize], initial_psn: Psn) -> Result<GroupHandle, HarnessError> {
        let mut qps = BTreeMap::new();
        let mut entries = Vec::new();
        for &m in members {
            let (qp, qpn) = self.hosts[m].create_group_qp(group, initial_psn);
            qps.insert(m, qp);
            entries.push(EnvelopeEntry {
                ip: self.hosts[m].ip,
                qpn,
            });
        }
        let g = GroupMembership::new(group, self.hosts[master].ip, entries);
        let now = self.now();
        let envelopes = self.hosts[master].master_register(now, g, initial_psn)?;
        for p in envelopes {
            self.host_send(master, p);
        }
        self.after_host(master);
        Ok(GroupHandle {
            group,
            master,
            members: members.to_vec(),
            qps,
        })
    }

    /// Registers every group concurrently and runs until all are ready.
    pub fn register_groups(&mut self, specs: &[(GroupIp, usize, Vec<usize>)], initial_psn: Psn) -> Result<Vec<GroupHandle>, HarnessError> {
        let mut handles = Vec::with_capacity(specs.len());
        for (group, master, members) in specs {
            handles.push(self.setup_group(*group, *master, members, initial_psn)?);
        }
        self.run(&mut super::workload::WaitReady(&handles))?;
        Ok(handles)
    }

    /// Hands the send role of `g` from host `old` to host `new`.
    pub fn switch_source(&mut self, g: &GroupHandle, old: usize, new: usize) -> Result<(), HarnessError> {
        if old == new {
            return Ok(());
        }
        let (qo, qn) = (g.qps[&old], g.qps[&new]);
        let (a, b) = if old < new {
            let (l, r) = self.hosts.split_at_mut(new);
            (l[old].qp_mut(qo), r[0].qp_mut(qn))
        } else {
            let (l, r) = self.hosts.split_at_mut(old);
            (r[0].qp_mut(qo), l[new].qp_mut(qn))
        };
        crate::host::switch_source(a, b)?;
        log::info!("group {} source {} -> {}", g.group, old, new);
        Ok(())
    }

    pub fn group_ready(&self, g: &GroupHandle) -> bool {
        self.registered.contains(&g.group) && g.qps.iter().all(|(&h, &q)| self.ready.contains(&(h, q)))
    }

    /// Wakes the pacer of `host`.
    pub fn kick(&mut self, host: usize) {
        let now = self.now();
        self.kick_at(host, now);
    }

    fn kick_at(&mut self, host: usize, at: SimTime) {
        let at = at.max(self.now());
        if self.tx_at[host].is_some_and(|t| t <= at) {
            return;
        }
        self.tx_token[host] += 1;
        self.tx_at[host] = Some(at);
        let token = self.tx_token[host];
        self.sched
            .schedule(at, Event::HostTx { host, token })
            .expect("clamped to now");
    }

    fn ensure_aging(&mut self) {
        if !self.aging {
            self.aging = true;
            self.sched.schedule_in(self.cfg.age_interval_s, Event::Age);
        }
    }

    /// Runs events until `driver` reports completion.
    pub fn run(&mut self, driver: &mut dyn Driver) -> Result<(), HarnessError> {
        self.ensure_aging();
        loop {
            self.flush_completions(driver)?;
            if driver.done(self) {
                return Ok(());
            }
            let Some((t, ev)) = self.sched.pop() else {
                return Err(HarnessError::Deadlock {
                    t: self.now().as_secs(),
                    reason: "event queue drained with work outstanding".into(),
                });
            };
            if t.as_secs() > self.cfg.max_sim_time_s {
                return Err(HarnessError::Deadlock {
                    t: t.as_secs(),
                    reason: format!("simulated time limit {} s exceeded", self.cfg.max_sim_time_s),
                });
            }
            match ev {
                Event::Hook(tag) => driver.on_hook(self, tag)?,
                ev => self.dispatch(t, ev),
            }
        }
    }

    fn flush_completions(&mut self, driver: &mut dyn Driver) -> Result<(), HarnessError> {
        while !self.completions.is_empty() {
            let cs = std::mem::take(&mut self.completions);
            for (h, c) in cs {
                match c {
                    Completion::Ready { qp } => {
                        self.ready.insert((h, qp));
                    }
                    Completion::Registered { group } => {
                        self.registered.insert(group);
                    }
                    _ => {}
                }
                driver.on_completion(self, h, &c)?;
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, now: SimTime, ev: Event) {
        match ev {
            Event::Arrive { to, packet } => {
                self.fabric.delivered(now, to, &packet);
                match self.host_of_node[to.node] {
                    Some(h) => {
                        let fb = self.hosts[h].on_packet(now, &packet);
                        for p in fb {
                            self.host_send(h, p);
                        }
                        self.after_host(h);
                        self.kick(h);
                    }
                    None => self.switch_rx(now, to, packet),
                }
            }
            Event::HostTx { host, token } => {
                if token != self.tx_token[host] {
                    return;
                }
                self.tx_at[host] = None;
                let node = self.host_node(host);
                let busy = self.fabric.busy_until(&self.topo, node, 0);
                if busy > now {
                    self.kick_at(host, busy);
                    return;
                }
                match self.hosts[host].poll_tx(now) {
                    TxPoll::Packet(p) => {
                        self.host_send(host, p);
                        let busy = self.fabric.busy_until(&self.topo, node, 0);
                        self.kick_at(host, busy);
                    }
                    TxPoll::Wait(t) => self.kick_at(host, t),
                    TxPoll::Idle => {}
                }
                self.after_host(host);
            }
            Event::HostTimer { host, timer } => {
                for p in self.hosts[host].on_timer(now, timer) {
                    self.host_send(host, p);
                }
                self.after_host(host);
                self.kick(host);
            }
            Event::Age => {
                for t in self.switches.iter_mut().flatten() {
                    t.age_counters();
                }
                if self.sched.is_empty() {
                    self.aging = false;
                } else {
                    self.sched.schedule_in(self.cfg.age_interval_s, Event::Age);
                }
            }
            Event::Hook(_) => unreachable!("hooks go to the driver"),
        }
    }

    fn after_host(&mut self, host: usize) {
        for (at, timer) in self.hosts[host].take_timers() {
            let at = at.max(self.now());
            self.sched
                .schedule(at, Event::HostTimer { host, timer })
                .expect("clamped to now");
        }
        let cs = self.hosts[host].take_completions();
        self.completions.extend(cs.into_iter().map(|c| (host, c)));
    }

    fn host_send(&mut self, host: usize, p: Packet) {
        let node = self.host_node(host);
        self.send(node, 0, p);
    }

    fn send(&mut self, node: NodeId, port: PortId, p: Packet) {
        let now = self.now();
        match self.fabric.transmit(&self.topo, now, Endpoint { node, port }, p) {
            Transmit::Arrive { at, to, packet } => {
                self.sched
                    .schedule(at, Event::Arrive { to, packet })
                    .expect("arrivals are in the future");
            }
            Transmit::Unconnected => {
                self.stats.unroutable += 1;
            }
            Transmit::Lost | Transmit::QueueFull => {}
        }
    }

    fn switch_rx(&mut self, now: SimTime, at: Endpoint, p: Packet) {
        let node = at.node;
        let in_port = at.port;
        let multicast = GroupIp::new(p.ip.dst).is_some();
        let table = self.switches[node].as_mut().expect("non-host nodes are switches");
        let result = if !multicast {
            Ok(None)
        } else {
            match &p.body {
                Body::Envelope(_) => {
                    let view = PortView {
                        topo: &self.topo,
                        routes: &self.routes,
                        node,
                        attached: &self.attached[node],
                    };
                    table.handle_envelope(&p, in_port, &view).map(Some)
                }
                Body::Data(_) => table.forward_data(&p, in_port).map(Some),
                Body::Ack(_) | Body::Nack(_) => table.handle_feedback(&p, in_port).map(Some),
                Body::Cnp(_) => table
                    .filter_congestion(&p, in_port)
                    .map(|o| Some(o.into_iter().collect())),
            }
        };
        for event in table.take_events() {
            log::info!("switch {}: {:?}", self.topo.node(node).name, event);
            self.switch_log.push(LoggedSwitchEvent {
                t: now.as_secs(),
                switch: self.topo.node(node).name.clone(),
                event,
            });
        }
        match result {
            Ok(Some(out)) => {
                for (port, q) in out {
                    self.send(node, port, q);
                }
            }
            Ok(None) => {
                let qpn = p.bth().map_or(0, |b| b.dst_qpn.value());
                match self.routes.select(node, p.ip.dst, flow_key(p.ip.src, p.ip.dst, qpn)) {
                    Some(port) => self.send(node, port, p),
                    None => {
                        self.stats.unroutable += 1;
                        log::warn!("no route at {} for {}", self.topo.node(node).name, p.ip.dst);
                    }
                }
            }
            Err(e) => {
                self.stats.switch_errors += 1;
                log::debug!("switch {} dropped {:?}: {e}", self.topo.node(node).name, p.kind());
            }
        }
    }
}
