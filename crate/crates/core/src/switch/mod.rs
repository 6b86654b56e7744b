//! Multicast switch state machine.
//!
//! A [`SwitchTable`] maps each group IP to a [`GroupState`]: group-level
//! aggregation state plus one [`PortEntry`] per participating port. Data
//! entering on the port that faces the current source is copied to every
//! other entry, with per-receiver header rewrite on ports that face a
//! member host. Feedback travels the opposite way and is aggregated so that
//! an ACK only leaves the switch once every downstream branch has reached
//! it.

mod mr;

pub use mr::{decode_mr_list, encode_mr_list, is_mr_update, MAX_MR_RECORDS, MR_MAGIC};

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use serde::Serialize;
use thiserror::Error;

use crate::netsim::PortId;
use crate::psn::{psn_ge, psn_le, psn_min};
use crate::wire::{
    AckBody, AckKind, Body, Bth, DataOp, Ecn, EnvelopeEntry, EthHeader, GroupIp, IpHeader, MacAddr,
    MrInfo, Packet, PacketKind, Psn, Qpn, UdpHeader, MULTICAST_QPN, ROCE_UDP_PORT,
};

/// Group-level bytes in the footprint model.
pub const GROUP_STATE_BYTES: usize = 24;
/// Per-entry bytes in the footprint model.
pub const PORT_ENTRY_BYTES: usize = 14;

const FEEDBACK_SRC_PORT: u16 = 0xC000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SwitchError {
    #[error("no group {0} in the forwarding table")]
    UnknownGroup(Ipv4Addr),
    #[error("{0} is not a multicast address")]
    NotMulticast(Ipv4Addr),
    #[error("no route toward {0}")]
    NoRoute(Ipv4Addr),
    #[error("port {port} of group {group} already holds a different member")]
    GroupConflict { group: Ipv4Addr, port: PortId },
    #[error("WRITE toward {0} has no memory region installed")]
    MissingMr(Ipv4Addr),
    #[error("malformed MR list: {0}")]
    MalformedMrList(&'static str),
    #[error("unexpected {0:?} packet")]
    WrongKind(PacketKind),
    #[error("port {0} out of range")]
    PortOutOfRange(PortId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    /// The port faces a member host; copies are rewritten to address it.
    Connected {
        ip: Ipv4Addr,
        qpn: Qpn,
        mac: MacAddr,
        mr: Option<MrInfo>,
    },
    /// The port faces another switch on the group's tree.
    Forwarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PortEntry {
    pub port: PortId,
    pub kind: EntryKind,
    /// Largest PSN acknowledged by everything behind this port.
    pub ack_psn: Psn,
}

impl PortEntry {
    pub fn is_forwarded(&self) -> bool {
        matches!(self.kind, EntryKind::Forwarded)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    pub group_ip: GroupIp,
    /// Sorted by port.
    pub entries: Vec<PortEntry>,
    /// Value new entries start from: the group's initial PSN minus one.
    pub init_ack_psn: Psn,
    pub last_ack_psn: Psn,
    pub ack_out_port: PortId,
    pub min_port: PortId,
    pub pending_nack: Option<Psn>,
    pub cong_counter: BTreeMap<PortId, f64>,
    pub initialized_ack_out: bool,
}

impl GroupState {
    fn new(group_ip: GroupIp, init_ack_psn: Psn) -> Self {
        Self {
            group_ip,
            entries: Vec::new(),
            init_ack_psn,
            last_ack_psn: init_ack_psn,
            ack_out_port: 0,
            min_port: 0,
            pending_nack: None,
            cong_counter: BTreeMap::new(),
            initialized_ack_out: false,
        }
    }

    pub fn entry(&self, port: PortId) -> Option<&PortEntry> {
        self.entries.iter().find(|e| e.port == port)
    }

    fn entry_mut(&mut self, port: PortId) -> Option<&mut PortEntry> {
        self.entries.iter_mut().find(|e| e.port == port)
    }

    fn insert(&mut self, entry: PortEntry) {
        let at = self.entries.partition_point(|e| e.port < entry.port);
        self.entries.insert(at, entry);
    }

    /// Entries that contribute to the aggregated ACK.
    pub fn downstream(&self) -> impl Iterator<Item = &PortEntry> + '_ {
        let out = self.initialized_ack_out.then_some(self.ack_out_port);
        self.entries.iter().filter(move |e| Some(e.port) != out)
    }

    fn lowest_downstream_port(&self) -> PortId {
        self.downstream()
            .next()
            .map_or(self.ack_out_port, |e| e.port)
    }

    pub fn connected(&self) -> impl Iterator<Item = &PortEntry> + '_ {
        self.entries.iter().filter(|e| !e.is_forwarded())
    }
}

/// Structured records emitted for the harness.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SwitchEvent {
    SourceSwitch {
        group: Ipv4Addr,
        old_port: PortId,
        new_port: PortId,
    },
    NackForwarded {
        group: Ipv4Addr,
        epsn: u32,
        port: PortId,
    },
}

/// What registration needs to know about the switch's surroundings.
pub trait PortMap {
    /// Equal-cost output ports toward `ip`.
    fn candidates(&self, ip: Ipv4Addr) -> Vec<PortId>;
    /// Port and MAC of `ip` when it is a host wired directly to this switch.
    fn attached(&self, ip: Ipv4Addr) -> Option<(PortId, MacAddr)>;
    /// Whether `port` leads to another switch.
    fn faces_switch(&self, port: PortId) -> bool;
}

#[derive(Debug, Clone)]
pub struct SwitchTable {
    pub n_ports: usize,
    pub mac: MacAddr,
    pub groups: BTreeMap<GroupIp, GroupState>,
    /// Number of groups holding an entry on each port.
    pub port_utilization: Vec<u32>,
    events: Vec<SwitchEvent>,
}

impl SwitchTable {
    pub fn new(n_ports: usize, mac: MacAddr) -> Self {
        Self {
            n_ports,
            mac,
            groups: BTreeMap::new(),
            port_utilization: vec![0; n_ports],
            events: Vec::new(),
        }
    }

    pub fn group(&self, ip: Ipv4Addr) -> Option<&GroupState> {
        GroupIp::new(ip).and_then(|g| self.groups.get(&g))
    }

    fn group_mut(&mut self, ip: Ipv4Addr) -> Result<&mut GroupState, SwitchError> {
        GroupIp::new(ip)
            .and_then(|g| self.groups.get_mut(&g))
            .ok_or(SwitchError::UnknownGroup(ip))
    }

    pub fn take_events(&mut self) -> Vec<SwitchEvent> {
        std::mem::take(&mut self.events)
    }

    fn check_port(&self, port: PortId) -> Result<(), SwitchError> {
        if port < self.n_ports {
            Ok(())
        } else {
            Err(SwitchError::PortOutOfRange(port))
        }
    }

    /// Installs the members listed in envelope `p` and returns the envelopes
    /// to send on, one per output port that received at least one member.
    ///
    /// Members attached to this switch become `Connected` entries. Others
    /// go out a `Forwarded` port: one the group already forwards on if it
    /// is a candidate, otherwise the least-utilized candidate. An envelope
    /// arriving from another switch also marks `in_port` as `Forwarded` so
    /// that data from a later source can flow back along the tree. The
    /// table is left untouched when an error is returned.
    pub fn handle_envelope(
        &mut self,
        p: &Packet,
        in_port: PortId,
        map: &impl PortMap,
    ) -> Result<Vec<(PortId, Packet)>, SwitchError> {
        let env = p.as_envelope().ok_or(SwitchError::WrongKind(p.kind()))?;
        let group_ip = GroupIp::new(p.ip.dst).ok_or(SwitchError::NotMulticast(p.ip.dst))?;
        self.check_port(in_port)?;
        let init = p.envelope_init_ack_psn();

        let mut g = self
            .groups
            .get(&group_ip)
            .cloned()
            .unwrap_or_else(|| GroupState::new(group_ip, init.unwrap_or(Psn::MAX)));
        let mut util = self.port_utilization.clone();

        if let Some(init) = init {
            if !g.initialized_ack_out && g.init_ack_psn != init {
                g.init_ack_psn = init;
                g.last_ack_psn = init;
                for e in &mut g.entries {
                    e.ack_psn = init;
                }
            }
        }

        let mut buckets: BTreeMap<PortId, Vec<EnvelopeEntry>> = BTreeMap::new();
        for member in &env.entries {
            let port = match map.attached(member.ip) {
                Some((port, mac)) => {
                    self.check_port(port)?;
                    match g.entry(port).map(|e| e.kind) {
                        None => {
                            g.insert(PortEntry {
                                port,
                                kind: EntryKind::Connected {
                                    ip: member.ip,
                                    qpn: member.qpn,
                                    mac,
                                    mr: None,
                                },
                                ack_psn: g.init_ack_psn,
                            });
                            util[port] += 1;
                        }
                        Some(EntryKind::Connected { ip, qpn, .. })
                            if ip == member.ip && qpn == member.qpn => {}
                        Some(_) => {
                            return Err(SwitchError::GroupConflict {
                                group: group_ip.addr(),
                                port,
                            })
                        }
                    }
                    port
                }
                None => {
                    let cands: Vec<PortId> = map
                        .candidates(member.ip)
                        .into_iter()
                        .filter(|&c| c != in_port && c < self.n_ports)
                        .collect();
                    let reuse = cands
                        .iter()
                        .copied()
                        .find(|&c| g.entry(c).is_some_and(PortEntry::is_forwarded));
                    match reuse {
                        Some(port) => port,
                        None => {
                            let port = cands
                                .iter()
                                .copied()
                                .min_by_key(|&c| (util[c], c))
                                .ok_or(SwitchError::NoRoute(member.ip))?;
                            if g.entry(port).is_some() {
                                return Err(SwitchError::GroupConflict {
                                    group: group_ip.addr(),
                                    port,
                                });
                            }
                            g.insert(PortEntry {
                                port,
                                kind: EntryKind::Forwarded,
                                ack_psn: g.init_ack_psn,
                            });
                            util[port] += 1;
                            port
                        }
                    }
                }
            };
            buckets.entry(port).or_default().push(*member);
        }

        if map.faces_switch(in_port) && g.entry(in_port).is_none() {
            g.insert(PortEntry {
                port: in_port,
                kind: EntryKind::Forwarded,
                ack_psn: g.init_ack_psn,
            });
            util[in_port] += 1;
        }

        let mut out = Vec::with_capacity(buckets.len());
        for (port, entries) in buckets {
            let mut copy = p.clone();
            copy.eth.src_mac = self.mac;
            if let Some(EntryKind::Connected { mac, .. }) = g.entry(port).map(|e| e.kind) {
                copy.eth.dst_mac = mac;
            }
            if let Body::Envelope(e) = &mut copy.body {
                e.entries = entries;
            }
            out.push((port, copy));
        }

        self.groups.insert(group_ip, g);
        self.port_utilization = util;
        Ok(out)
    }

    /// Tracks which port faces the source. A change of port is a source
    /// switch: the branch toward the old source is seeded with the last
    /// aggregated PSN and aggregation restarts on the new layout.
    fn observe_source(g: &mut GroupState, in_port: PortId, events: &mut Vec<SwitchEvent>) {
        if !g.initialized_ack_out {
            g.ack_out_port = in_port;
            g.initialized_ack_out = true;
            g.min_port = g.lowest_downstream_port();
            return;
        }
        if in_port == g.ack_out_port {
            return;
        }
        let old = g.ack_out_port;
        log::info!("group {} source moved from port {old} to port {in_port}", g.group_ip);
        events.push(SwitchEvent::SourceSwitch {
            group: g.group_ip.addr(),
            old_port: old,
            new_port: in_port,
        });
        let last = g.last_ack_psn;
        if let Some(e) = g.entry_mut(old) {
            e.ack_psn = last;
        }
        g.ack_out_port = in_port;
        g.pending_nack = None;
        g.min_port = g.lowest_downstream_port();
    }

    /// Copies a data packet to every entry except the ingress port.
    pub fn forward_data(&mut self, p: &Packet, in_port: PortId) -> Result<Vec<(PortId, Packet)>, SwitchError> {
        let data = p.as_data().ok_or(SwitchError::WrongKind(p.kind()))?;
        let mac = self.mac;
        let events = &mut self.events;
        let g = GroupIp::new(p.ip.dst)
            .and_then(|ip| self.groups.get_mut(&ip))
            .ok_or(SwitchError::UnknownGroup(p.ip.dst))?;
        Self::observe_source(g, in_port, events);

        if is_mr_update(data) {
            apply_mr_list(g, &data.payload)?;
            return Ok(g
                .entries
                .iter()
                .filter(|e| e.port != in_port && e.is_forwarded())
                .map(|e| (e.port, p.clone()))
                .collect());
        }

        let is_write_first = matches!(data.op, DataOp::WriteFirst(_));
        if is_write_first {
            if let Some(e) = g.entries.iter().find(|e| {
                e.port != in_port && matches!(e.kind, EntryKind::Connected { mr: None, .. })
            }) {
                let EntryKind::Connected { ip, .. } = e.kind else { unreachable!() };
                return Err(SwitchError::MissingMr(ip));
            }
        }

        let group_addr = g.group_ip.addr();
        let mut out = Vec::with_capacity(g.entries.len());
        for e in g.entries.iter_mut().filter(|e| e.port != in_port) {
            let mut copy = p.clone();
            if let EntryKind::Connected { ip, qpn, mac: dst_mac, mr } = &mut e.kind {
                copy.ip.dst = *ip;
                copy.ip.src = group_addr;
                copy.eth.dst_mac = *dst_mac;
                copy.eth.src_mac = mac;
                if let Body::Data(d) = &mut copy.body {
                    d.bth.dst_qpn = *qpn;
                    if let DataOp::WriteFirst(reth) = &mut d.op {
                        let info = mr.take().expect("checked above");
                        reth.va = info.va;
                        reth.rkey = info.rkey;
                    }
                }
            }
            out.push((e.port, copy));
        }
        Ok(out)
    }

    /// Installs the memory regions listed in an MR-update payload on the
    /// matching `Connected` entries.
    pub fn mr_update(&mut self, p: &Packet) -> Result<(), SwitchError> {
        let data = p.as_data().ok_or(SwitchError::WrongKind(p.kind()))?;
        let g = self.group_mut(p.ip.dst)?;
        apply_mr_list(g, &data.payload)
    }

    /// Folds one ACK or NACK from `in_port` into the group state and returns
    /// any feedback to send toward the source.
    pub fn handle_feedback(&mut self, p: &Packet, in_port: PortId) -> Result<Vec<(PortId, Packet)>, SwitchError> {
        let mac = self.mac;
        let events = &mut self.events;
        let g = GroupIp::new(p.ip.dst)
            .and_then(|ip| self.groups.get_mut(&ip))
            .ok_or(SwitchError::UnknownGroup(p.ip.dst))?;
        if g.initialized_ack_out && in_port == g.ack_out_port {
            return Ok(Vec::new());
        }
        let min_port = g.min_port;
        let last = g.last_ack_psn;
        let Some(idx) = g.entries.iter().position(|e| e.port == in_port) else {
            return Ok(Vec::new());
        };
        let fire = match &p.body {
            Body::Ack(a) if a.kind == AckKind::Normal => {
                let psn = a.bth.psn;
                if ge(psn, g.entries[idx].ack_psn) {
                    g.entries[idx].ack_psn = psn;
                }
                in_port == min_port && ge(psn, last)
            }
            Body::Nack(bth) => {
                let acked = bth.psn.prev();
                if ge(acked, g.entries[idx].ack_psn) {
                    g.entries[idx].ack_psn = acked;
                }
                match g.pending_nack {
                    Some(e) if !le(bth.psn, e) => in_port == min_port && ge(acked, last),
                    _ => {
                        g.pending_nack = Some(bth.psn);
                        true
                    }
                }
            }
            _ => return Err(SwitchError::WrongKind(p.kind())),
        };
        if fire && g.initialized_ack_out {
            Ok(generate_into(g, mac, events))
        } else {
            Ok(Vec::new())
        }
    }

    /// Recomputes the minimum over downstream entries and emits the
    /// aggregated ACK, plus the pending NACK once every branch has caught
    /// up to it.
    pub fn generate(&mut self, group: GroupIp) -> Result<Vec<(PortId, Packet)>, SwitchError> {
        let mac = self.mac;
        let g = self
            .groups
            .get_mut(&group)
            .ok_or(SwitchError::UnknownGroup(group.addr()))?;
        Ok(generate_into(g, mac, &mut self.events))
    }

    /// Counts a CNP from `in_port` and passes it on only when that port is
    /// currently the most congested branch.
    pub fn filter_congestion(&mut self, p: &Packet, in_port: PortId) -> Result<Option<(PortId, Packet)>, SwitchError> {
        let Body::Cnp(bth) = &p.body else {
            return Err(SwitchError::WrongKind(p.kind()));
        };
        let bth = *bth;
        let mac = self.mac;
        let g = self.group_mut(p.ip.dst)?;
        *g.cong_counter.entry(in_port).or_insert(0.0) += 1.0;
        let (argmax, _) = g
            .cong_counter
            .iter()
            .fold((in_port, f64::NEG_INFINITY), |best, (&port, &c)| {
                if c > best.1 {
                    (port, c)
                } else {
                    best
                }
            });
        if argmax != in_port || !g.initialized_ack_out || in_port == g.ack_out_port {
            return Ok(None);
        }
        let out = upstream_packet(g, mac, Body::Cnp(bth));
        Ok(Some((g.ack_out_port, out)))
    }

    /// Halves every congestion counter.
    pub fn age_counters(&mut self) {
        for g in self.groups.values_mut() {
            for c in g.cong_counter.values_mut() {
                *c *= 0.5;
            }
        }
    }

    /// Table memory under the accounting model: a fixed group-level record
    /// plus a fixed record per port entry.
    pub fn table_footprint(&self) -> usize {
        self.groups
            .values()
            .map(|g| GROUP_STATE_BYTES + PORT_ENTRY_BYTES * g.entries.len())
            .sum()
    }
}

fn ge(a: Psn, b: Psn) -> bool {
    psn_ge(a, b).unwrap_or(false)
}

fn le(a: Psn, b: Psn) -> bool {
    psn_le(a, b).unwrap_or(false)
}

fn apply_mr_list(g: &mut GroupState, payload: &[u8]) -> Result<(), SwitchError> {
    let list = decode_mr_list(payload)?;
    for e in &mut g.entries {
        if let EntryKind::Connected { ip, mr, .. } = &mut e.kind {
            if let Some((_, info)) = list.iter().find(|(rip, _)| rip == ip) {
                *mr = Some(*info);
            }
        }
    }
    Ok(())
}

fn generate_into(g: &mut GroupState, mac: MacAddr, events: &mut Vec<SwitchEvent>) -> Vec<(PortId, Packet)> {
    let values: Vec<(usize, Psn)> = g.downstream().map(|e| (e.port, e.ack_psn)).collect();
    let Ok((min_port, min_psn)) = psn_min(&values) else {
        return Vec::new();
    };
    let out_port = g.ack_out_port;
    let mut out = vec![(
        out_port,
        upstream_packet(
            g,
            mac,
            Body::Ack(AckBody {
                bth: Bth::new(MULTICAST_QPN, min_psn),
                kind: AckKind::Normal,
            }),
        ),
    )];
    if let Some(epsn) = g.pending_nack {
        if ge(min_psn.next(), epsn) {
            out.push((out_port, upstream_packet(g, mac, Body::Nack(Bth::new(MULTICAST_QPN, epsn)))));
            g.pending_nack = None;
            log::debug!("group {} forwards NACK epsn {epsn}", g.group_ip);
            events.push(SwitchEvent::NackForwarded {
                group: g.group_ip.addr(),
                epsn: epsn.value(),
                port: out_port,
            });
        }
    }
    g.last_ack_psn = min_psn;
    g.min_port = min_port;
    out
}

/// Builds a feedback packet toward the source. If the source is attached
/// to this switch the packet is addressed to it directly; otherwise it
/// keeps the group address so the next switch can aggregate it.
fn upstream_packet(g: &GroupState, mac: MacAddr, mut body: Body) -> Packet {
    let (dst, dst_mac, qpn) = match g.entry(g.ack_out_port).map(|e| e.kind) {
        Some(EntryKind::Connected { ip, qpn, mac, .. }) => (ip, mac, qpn),
        _ => (g.group_ip.addr(), MacAddr::BROADCAST, MULTICAST_QPN),
    };
    match &mut body {
        Body::Ack(a) => a.bth.dst_qpn = qpn,
        Body::Nack(b) | Body::Cnp(b) => b.dst_qpn = qpn,
        _ => {}
    }
    Packet {
        eth: EthHeader { dst_mac, src_mac: mac },
        ip: IpHeader {
            src: g.group_ip.addr(),
            dst,
            ecn: Ecn::NotEct,
        },
        udp: UdpHeader {
            src_port: FEEDBACK_SRC_PORT,
            dst_port: ROCE_UDP_PORT,
        },
        body,
    }
}

/// Connected members of `g`, by IP.
pub fn connected_members(g: &GroupState) -> BTreeSet<Ipv4Addr> {
    g.connected()
        .filter_map(|e| match e.kind {
            EntryKind::Connected { ip, .. } => Some(ip),
            EntryKind::Forwarded => None,
        })
        .collect()
}
