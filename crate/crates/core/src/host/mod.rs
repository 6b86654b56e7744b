//! RDMA RC end host: queue pairs, memory regions, group registration and
//! a round-robin pacer shared by all QPs of the NIC.

mod qp;
#[cfg(test)]
mod tests;

pub use qp::{switch_source, Delivered, QpStats, QueuePair, MAX_MESSAGE_BYTES};

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::SimTime;
use crate::wire::{
    AckBody, AckKind, Body, Bth, Ecn, EnvelopeBody, EnvelopeEntry, EthHeader, GroupIp, IpHeader,
    MacAddr, MrInfo, Packet, Psn, Qpn, UdpHeader, ENVELOPE_UDP_PORT, MAX_DATA_PAYLOAD,
    MAX_ENVELOPE_ENTRIES, MULTICAST_QPN, ROCE_UDP_PORT,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HostError {
    #[error("message of {0} bytes exceeds the 2 GiB limit")]
    MessageTooLarge(u64),
    #[error("queue pair is not registered")]
    NotRegistered,
    #[error("source switch requires both queue pairs to be idle")]
    NotQuiesced,
    #[error("group has no members")]
    NoMembers,
    #[error("no memory region for receiver {0}")]
    MissingMr(Ipv4Addr),
    #[error("unknown queue pair index {0}")]
    UnknownQp(usize),
    #[error("invalid host parameter: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostConfig {
    /// Payload bytes per data packet.
    pub mtu_payload: usize,
    pub window: u32,
    /// ACK every c-th in-order packet.
    pub ack_coalesce: u32,
    pub line_rate_bps: f64,
    pub rate_min_bps: f64,
    pub rate_ai_bps: f64,
    pub t_ai_s: f64,
    pub cnp_interval_s: f64,
    pub rto_s: f64,
    pub rto_max_factor: u32,
    pub register_timeout_s: f64,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self {
            mtu_payload: 1024,
            window: 512,
            ack_coalesce: 1,
            line_rate_bps: 100e9,
            rate_min_bps: 1e9,
            rate_ai_bps: 5e9,
            t_ai_s: 50e-6,
            cnp_interval_s: 50e-6,
            rto_s: 30e-6,
            rto_max_factor: 16,
            register_timeout_s: 200e-6,
        }
    }
}

impl HostConfig {
    pub fn validate(&self) -> Result<(), HostError> {
        let bad = |m: &str| Err(HostError::InvalidConfig(m.to_string()));
        if self.mtu_payload == 0 || self.mtu_payload > MAX_DATA_PAYLOAD {
            return bad("mtu_payload must be in 1..=1444");
        }
        if self.window == 0 || self.window > crate::psn::MAX_INFLIGHT {
            return bad("window must be in 1..2^22");
        }
        if !(1..=16).contains(&self.ack_coalesce) {
            return bad("ack_coalesce must be in 1..=16");
        }
        let positive = [
            self.line_rate_bps,
            self.rate_min_bps,
            self.rate_ai_bps,
            self.t_ai_s,
            self.cnp_interval_s,
            self.rto_s,
            self.register_timeout_s,
        ];
        if positive.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return bad("rates and durations must be positive");
        }
        if self.rate_min_bps > self.line_rate_bps {
            return bad("rate_min_bps exceeds line rate");
        }
        if self.rto_max_factor == 0 {
            return bad("rto_max_factor must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryRegion {
    pub va: u64,
    pub rkey: u32,
    pub buffer: Vec<u8>,
}

impl MemoryRegion {
    pub fn info(&self) -> MrInfo {
        MrInfo {
            va: self.va,
            rkey: self.rkey,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkKind {
    Send,
    Write {
        per_receiver_mr: BTreeMap<Ipv4Addr, MrInfo>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkRequest {
    pub kind: WorkKind,
    pub message: Bytes,
}

impl WorkRequest {
    pub fn send(message: impl Into<Bytes>) -> Self {
        Self {
            kind: WorkKind::Send,
            message: message.into(),
        }
    }

    pub fn write(message: impl Into<Bytes>, per_receiver_mr: BTreeMap<Ipv4Addr, MrInfo>) -> Self {
        Self {
            kind: WorkKind::Write { per_receiver_mr },
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMembership {
    pub group_ip: GroupIp,
    pub members: Vec<EnvelopeEntry>,
    pub master_ip: Ipv4Addr,
    pub confirmed: BTreeSet<Ipv4Addr>,
}

impl GroupMembership {
    pub fn new(group_ip: GroupIp, master_ip: Ipv4Addr, members: Vec<EnvelopeEntry>) -> Self {
        Self {
            group_ip,
            members,
            master_ip,
            confirmed: BTreeSet::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.members.iter().all(|m| self.confirmed.contains(&m.ip))
    }
}

/// Splits `g.members` into envelope packets addressed to the group. The
/// first one carries `initial_psn - 1` as the initial acknowledged PSN.
pub fn build_envelopes(g: &GroupMembership, master_mac: MacAddr, initial_psn: Psn) -> Result<Vec<Packet>, HostError> {
    if g.members.is_empty() {
        return Err(HostError::NoMembers);
    }
    let chunks: Vec<_> = g.members.chunks(MAX_ENVELOPE_ENTRIES).collect();
    let total = chunks.len() as u16;
    Ok(chunks
        .into_iter()
        .enumerate()
        .map(|(i, entries)| {
            let mut p = Packet {
                eth: EthHeader {
                    dst_mac: MacAddr::BROADCAST,
                    src_mac: master_mac,
                },
                ip: IpHeader {
                    src: g.master_ip,
                    dst: g.group_ip.addr(),
                    ecn: Ecn::NotEct,
                },
                udp: UdpHeader {
                    src_port: 0,
                    dst_port: ENVELOPE_UDP_PORT,
                },
                body: Body::Envelope(EnvelopeBody {
                    seq: i as u16 + 1,
                    total,
                    flags: 0,
                    entries: entries.to_vec(),
                }),
            };
            if i == 0 {
                p.set_envelope_init_ack_psn(initial_psn.prev());
            }
            p
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timer {
    Rto { qp: usize, token: u64 },
    RateRecovery { qp: usize, token: u64 },
    Register { group: GroupIp },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Completion {
    /// A posted message was fully acknowledged.
    Sent { qp: usize, msg: u64 },
    Received { qp: usize, len: u64, digest: [u8; 32] },
    /// A group QP became usable after its envelope arrived.
    Ready { qp: usize },
    /// All members confirmed a group this host registered.
    Registered { group: GroupIp },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct HostStats {
    pub unknown_qpn_drops: u64,
    pub confirmations_sent: u64,
    pub envelopes_sent: u64,
}

/// Result of polling the pacer.
#[derive(Debug, Clone, PartialEq)]
pub enum TxPoll {
    Packet(Packet),
    /// Nothing eligible before this time.
    Wait(SimTime),
    Idle,
}

struct Registration {
    membership: GroupMembership,
    envelopes: Vec<Packet>,
    done: bool,
}

pub struct Host {
    pub ip: Ipv4Addr,
    pub mac: MacAddr,
    pub cfg: HostConfig,
    pub stats: HostStats,
    qps: Vec<QueuePair>,
    by_qpn: BTreeMap<Qpn, usize>,
    mrs: BTreeMap<u32, MemoryRegion>,
    registrations: BTreeMap<GroupIp, Registration>,
    timers: Vec<(SimTime, Timer)>,
    completions: Vec<Completion>,
    rr: usize,
    next_qpn: u32,
    next_rkey: u32,
    next_va: u64,
}

impl Host {
    pub fn new(ip: Ipv4Addr, mac: MacAddr, cfg: HostConfig) -> Self {
        Self {
            ip,
            mac,
            cfg,
            stats: HostStats::default(),
            qps: Vec::new(),
            by_qpn: BTreeMap::new(),
            mrs: BTreeMap::new(),
            registrations: BTreeMap::new(),
            timers: Vec::new(),
            completions: Vec::new(),
            rr: 0,
            next_qpn: 0x100,
            next_rkey: 0x1000,
            next_va: 0x10_0000,
        }
    }

    /// Unicast RC QP, usable immediately.
    pub fn create_qp(&mut self, dest_ip: Ipv4Addr, dest_qpn: Qpn, dest_mac: MacAddr, initial_psn: Psn) -> (usize, Qpn) {
        let idx = self.alloc_qp(dest_ip, dest_qpn, dest_mac, initial_psn);
        self.qps[idx].ready = true;
        (idx, self.qps[idx].local_qpn)
    }

    /// Group QP; becomes ready when a registration envelope listing this
    /// host arrives.
    pub fn create_group_qp(&mut self, group: GroupIp, initial_psn: Psn) -> (usize, Qpn) {
        let idx = self.alloc_qp(group.addr(), MULTICAST_QPN, MacAddr::BROADCAST, initial_psn);
        self.qps[idx].group = Some(group);
        (idx, self.qps[idx].local_qpn)
    }

    fn alloc_qp(&mut self, dest_ip: Ipv4Addr, dest_qpn: Qpn, dest_mac: MacAddr, initial_psn: Psn) -> usize {
        let qpn = Qpn::new(self.next_qpn);
        self.next_qpn += 1;
        let qp = QueuePair::new(&self.cfg, qpn, dest_ip, dest_qpn, dest_mac, initial_psn);
        self.qps.push(qp);
        self.by_qpn.insert(qpn, self.qps.len() - 1);
        self.qps.len() - 1
    }

    pub fn qp(&self, idx: usize) -> &QueuePair {
        &self.qps[idx]
    }

    pub fn qp_mut(&mut self, idx: usize) -> &mut QueuePair {
        &mut self.qps[idx]
    }

    pub fn qps(&self) -> &[QueuePair] {
        &self.qps
    }

    pub fn register_mr(&mut self, len: usize) -> MrInfo {
        let mr = MemoryRegion {
            va: self.next_va,
            rkey: self.next_rkey,
            buffer: vec![0; len],
        };
        self.next_va += (len as u64).next_multiple_of(4096).max(4096);
        self.next_rkey += 1;
        let info = mr.info();
        self.mrs.insert(mr.rkey, mr);
        info
    }

    pub fn mr(&self, rkey: u32) -> Option<&MemoryRegion> {
        self.mrs.get(&rkey)
    }

    pub fn post_send(&mut self, qp: usize, wr: WorkRequest) -> Result<u64, HostError> {
        let q = self.qps.get_mut(qp).ok_or(HostError::UnknownQp(qp))?;
        q.post_send(&self.cfg, wr)
    }

    /// Builds the registration envelopes for `g` and arms the resend timer.
    pub fn master_register(&mut self, now: SimTime, g: GroupMembership, initial_psn: Psn) -> Result<Vec<Packet>, HostError> {
        let envelopes = build_envelopes(&g, self.mac, initial_psn)?;
        self.stats.envelopes_sent += envelopes.len() as u64;
        let group = g.group_ip;
        self.registrations.insert(
            group,
            Registration {
                membership: g,
                envelopes: envelopes.clone(),
                done: false,
            },
        );
        self.timers.push((now + self.cfg.register_timeout_s, Timer::Register { group }));
        Ok(envelopes)
    }

    pub fn membership(&self, group: GroupIp) -> Option<&GroupMembership> {
        self.registrations.get(&group).map(|r| &r.membership)
    }

    pub fn take_timers(&mut self) -> Vec<(SimTime, Timer)> {
        std::mem::take(&mut self.timers)
    }

    pub fn take_completions(&mut self) -> Vec<Completion> {
        for (i, q) in self.qps.iter_mut().enumerate() {
            for msg in q.take_sent() {
                self.completions.push(Completion::Sent { qp: i, msg });
            }
            for d in q.take_delivered() {
                self.completions.push(Completion::Received {
                    qp: i,
                    len: d.len,
                    digest: d.digest,
                });
            }
        }
        std::mem::take(&mut self.completions)
    }

    /// Handles an arriving packet and returns packets to send right away.
    pub fn on_packet(&mut self, now: SimTime, p: &Packet) -> Vec<Packet> {
        if let Body::Envelope(_) = p.body {
            return self.on_envelope(p);
        }
        if let Body::Ack(AckBody {
            kind: AckKind::Confirmation,
            bth,
        }) = p.body
        {
            self.on_confirmation(p.ip.src, bth.psn);
            return Vec::new();
        }
        let Some(bth) = p.bth() else {
            return Vec::new();
        };
        let Some(&idx) = self.by_qpn.get(&bth.dst_qpn) else {
            self.stats.unknown_qpn_drops += 1;
            return Vec::new();
        };
        let t = now.as_secs();
        match &p.body {
            Body::Data(_) => {
                let (ip, mac) = (self.ip, self.mac);
                self.qps[idx].on_data(&self.cfg, t, p, &mut self.mrs, ip, mac)
            }
            Body::Ack(a) => {
                if self.qps[idx].on_ack(a.bth.psn) {
                    self.rearm_rto(now, idx);
                }
                Vec::new()
            }
            Body::Nack(b) => {
                if self.qps[idx].on_nack(b.psn) {
                    self.rearm_rto(now, idx);
                }
                Vec::new()
            }
            Body::Cnp(_) => {
                let q = &mut self.qps[idx];
                q.on_cnp(&self.cfg);
                if !q.rate_timer_armed && q.rate_bps < self.cfg.line_rate_bps {
                    q.rate_timer_armed = true;
                    q.rate_token += 1;
                    let token = q.rate_token;
                    self.timers.push((now + self.cfg.t_ai_s, Timer::RateRecovery { qp: idx, token }));
                }
                Vec::new()
            }
            Body::Envelope(_) => unreachable!(),
        }
    }

    fn rearm_rto(&mut self, now: SimTime, idx: usize) {
        let q = &mut self.qps[idx];
        q.rto_token += 1;
        if q.unacked() == 0 {
            q.rto_armed = false;
            return;
        }
        q.rto_armed = true;
        let token = q.rto_token;
        self.timers.push((now + q.current_rto(), Timer::Rto { qp: idx, token }));
    }

    fn on_envelope(&mut self, p: &Packet) -> Vec<Packet> {
        let Some(env) = p.as_envelope() else {
            return Vec::new();
        };
        let Some(group) = GroupIp::new(p.ip.dst) else {
            return Vec::new();
        };
        let Some(me) = env.entries.iter().find(|e| e.ip == self.ip) else {
            return Vec::new();
        };
        if let Some(&idx) = self.by_qpn.get(&me.qpn) {
            let q = &mut self.qps[idx];
            if q.group == Some(group) && !q.ready {
                if let Some(init) = p.envelope_init_ack_psn() {
                    q.set_initial_psn(init.next());
                }
                q.ready = true;
                self.completions.push(Completion::Ready { qp: idx });
            }
        }
        if p.ip.src == self.ip {
            self.on_confirmation(self.ip, Psn::new(group.group_id()));
            return Vec::new();
        }
        self.stats.confirmations_sent += 1;
        vec![Packet {
            eth: EthHeader {
                dst_mac: p.eth.src_mac,
                src_mac: self.mac,
            },
            ip: IpHeader {
                src: self.ip,
                dst: p.ip.src,
                ecn: Ecn::NotEct,
            },
            udp: UdpHeader {
                src_port: 0xC000,
                dst_port: ROCE_UDP_PORT,
            },
            body: Body::Ack(AckBody {
                bth: Bth::new(me.qpn, Psn::new(group.group_id())),
                kind: AckKind::Confirmation,
            }),
        }]
    }

    fn on_confirmation(&mut self, from: Ipv4Addr, group_id: Psn) {
        let Some((group, reg)) = self
            .registrations
            .iter_mut()
            .find(|(g, _)| g.group_id() == group_id.value())
        else {
            return;
        };
        reg.membership.confirmed.insert(from);
        if !reg.done && reg.membership.is_complete() {
            reg.done = true;
            self.completions.push(Completion::Registered { group: *group });
        }
    }

    pub fn on_timer(&mut self, now: SimTime, timer: Timer) -> Vec<Packet> {
        match timer {
            Timer::Rto { qp, token } => {
                if self.qps[qp].rto_expire(&self.cfg, token) {
                    self.rearm_rto(now, qp);
                }
                Vec::new()
            }
            Timer::RateRecovery { qp, token } => {
                let q = &mut self.qps[qp];
                if token != q.rate_token {
                    return Vec::new();
                }
                if q.rate_recover(&self.cfg) {
                    q.rate_token += 1;
                    let token = q.rate_token;
                    self.timers.push((now + self.cfg.t_ai_s, Timer::RateRecovery { qp, token }));
                } else {
                    q.rate_timer_armed = false;
                }
                Vec::new()
            }
            Timer::Register { group } => {
                let Some(reg) = self.registrations.get(&group) else {
                    return Vec::new();
                };
                if reg.done {
                    return Vec::new();
                }
                let out = reg.envelopes.clone();
                self.stats.envelopes_sent += out.len() as u64;
                self.timers.push((now + self.cfg.register_timeout_s, Timer::Register { group }));
                out
            }
        }
    }

    /// Round-robin over QPs with eligible work. The caller is expected to
    /// poll again once the emitted packet has been serialized.
    pub fn poll_tx(&mut self, now: SimTime) -> TxPoll {
        let n = self.qps.len();
        let t = now.as_secs();
        let mut earliest: Option<f64> = None;
        for k in 0..n {
            let idx = (self.rr + k) % n;
            let q = &mut self.qps[idx];
            if !q.has_work() {
                continue;
            }
            if q.next_send_at() > t {
                earliest = Some(earliest.map_or(q.next_send_at(), |e: f64| e.min(q.next_send_at())));
                continue;
            }
            let Some(p) = q.next_packet(t, self.ip, self.mac) else {
                continue;
            };
            if !q.rto_armed {
                self.rearm_rto(now, idx);
            }
            self.rr = (idx + 1) % n;
            return TxPoll::Packet(p);
        }
        match earliest {
            Some(e) => TxPoll::Wait(SimTime::from_secs(e)),
            None => TxPoll::Idle,
        }
    }
}
