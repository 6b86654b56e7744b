use std::collections::VecDeque;
use std::net::Ipv4Addr;
use std::sync::Arc;

use bytes::Bytes;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{HostConfig, HostError, MemoryRegion, WorkKind, WorkRequest};
use crate::psn::psn_newer_exact;
use crate::switch::{encode_mr_list, is_mr_update, MAX_MR_RECORDS};
use crate::wire::{
    AckBody, AckKind, Body, Bth, DataBody, DataOp, Ecn, EthHeader, GroupIp, IpHeader, MacAddr,
    MrInfo, Packet, Psn, Qpn, Reth, UdpHeader, ROCE_UDP_PORT,
};

/// Largest message a work request may carry.
pub const MAX_MESSAGE_BYTES: u64 = 2 << 30;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct QpStats {
    pub data_sent: u64,
    pub retransmissions: u64,
    pub mr_updates_sent: u64,
    pub acks_rx: u64,
    pub nacks_rx: u64,
    pub cnps_rx: u64,
    pub timeouts: u64,
    pub delivered_pkts: u64,
    pub delivered_bytes: u64,
    pub duplicates: u64,
    pub out_of_order: u64,
    pub rejected: u64,
    pub acks_sent: u64,
    pub nacks_sent: u64,
    pub cnps_sent: u64,
    pub min_rate_bps: f64,
}

/// One finished inbound message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivered {
    pub len: u64,
    pub digest: [u8; 32],
}

#[derive(Debug, Clone)]
struct Segment {
    msg: u64,
    op: DataOp,
    payload: Bytes,
    last: bool,
    /// MR-update payloads that must precede this segment on the wire.
    preamble: Option<Arc<Vec<Bytes>>>,
}

#[derive(Debug, Clone)]
struct InFlight {
    psn: Psn,
    seg: Segment,
    sent: bool,
    preamble_sent: bool,
}

#[derive(Debug, Clone, Copy)]
struct WriteTarget {
    rkey: u32,
    offset: usize,
}

/// Reliable-connection queue pair: a go-back-N sender and an in-order
/// receiver sharing one PSN space per direction.
#[derive(Debug, Clone)]
pub struct QueuePair {
    pub local_qpn: Qpn,
    pub dest_ip: Ipv4Addr,
    pub dest_qpn: Qpn,
    pub dest_mac: MacAddr,
    pub group: Option<GroupIp>,
    pub ready: bool,

    pub sq_psn: Psn,
    pub rq_psn: Psn,
    pub acked_psn: Psn,
    pub window: u32,
    pub rate_bps: f64,
    pub rto_s: f64,
    pub nack_armed: bool,
    pub stats: QpStats,

    next_msg: u64,
    pending: VecDeque<Segment>,
    inflight: VecDeque<InFlight>,
    cursor: usize,
    preamble: VecDeque<Bytes>,
    next_send_at: f64,
    pub(super) rto_token: u64,
    pub(super) rto_armed: bool,
    rto_backoff: u32,
    pub(super) rate_token: u64,
    pub(super) rate_timer_armed: bool,

    since_ack: u32,
    last_cnp_at: Option<f64>,
    rx_hasher: Sha256,
    rx_len: u64,
    rx_write: Option<WriteTarget>,
    sent_done: Vec<u64>,
    delivered: Vec<Delivered>,
}

impl QueuePair {
    pub fn new(cfg: &HostConfig, local_qpn: Qpn, dest_ip: Ipv4Addr, dest_qpn: Qpn, dest_mac: MacAddr, initial_psn: Psn) -> Self {
        Self {
            local_qpn,
            dest_ip,
            dest_qpn,
            dest_mac,
            group: None,
            ready: false,
            sq_psn: initial_psn,
            rq_psn: initial_psn,
            acked_psn: initial_psn.prev(),
            window: cfg.window,
            rate_bps: cfg.line_rate_bps,
            rto_s: cfg.rto_s,
            nack_armed: false,
            stats: QpStats {
                min_rate_bps: cfg.line_rate_bps,
                ..Default::default()
            },
            next_msg: 0,
            pending: VecDeque::new(),
            inflight: VecDeque::new(),
            cursor: 0,
            preamble: VecDeque::new(),
            next_send_at: 0.0,
            rto_token: 0,
            rto_armed: false,
            rto_backoff: 1,
            rate_token: 0,
            rate_timer_armed: false,
            since_ack: 0,
            last_cnp_at: None,
            rx_hasher: Sha256::new(),
            rx_len: 0,
            rx_write: None,
            sent_done: Vec::new(),
            delivered: Vec::new(),
        }
    }

    /// Resets both PSN spaces to `initial`.
    pub fn set_initial_psn(&mut self, initial: Psn) {
        self.sq_psn = initial;
        self.rq_psn = initial;
        self.acked_psn = initial.prev();
    }

    pub fn unacked(&self) -> usize {
        self.inflight.len()
    }

    /// No queued, unsent or unacknowledged work.
    pub fn is_quiesced(&self) -> bool {
        self.pending.is_empty() && self.inflight.is_empty()
    }

    pub fn take_sent(&mut self) -> Vec<u64> {
        std::mem::take(&mut self.sent_done)
    }

    pub fn take_delivered(&mut self) -> Vec<Delivered> {
        std::mem::take(&mut self.delivered)
    }

    /// Segments `wr` and queues it for transmission. Returns a message id
    /// that is reported back on completion.
    pub fn post_send(&mut self, cfg: &HostConfig, wr: WorkRequest) -> Result<u64, HostError> {
        if !self.ready {
            return Err(HostError::NotRegistered);
        }
        let len = wr.message.len() as u64;
        if len > MAX_MESSAGE_BYTES {
            return Err(HostError::MessageTooLarge(len));
        }
        let msg = self.next_msg;
        self.next_msg += 1;
        let mtu = cfg.mtu_payload;
        let n = wr.message.len().div_ceil(mtu).max(1);

        let (first_reth, preamble) = match &wr.kind {
            WorkKind::Send => (None, None),
            WorkKind::Write { per_receiver_mr } => {
                if self.group.is_some() {
                    let records: Vec<(Ipv4Addr, MrInfo)> =
                        per_receiver_mr.iter().map(|(ip, mr)| (*ip, *mr)).collect();
                    let payloads = records
                        .chunks(MAX_MR_RECORDS)
                        .map(encode_mr_list)
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| HostError::MissingMr(self.dest_ip))?;
                    let payloads = if payloads.is_empty() {
                        vec![encode_mr_list(&[]).expect("empty list encodes")]
                    } else {
                        payloads
                    };
                    (Some(Reth { va: 0, rkey: 0, dma_len: len as u32 }), Some(Arc::new(payloads)))
                } else {
                    let mr = per_receiver_mr
                        .get(&self.dest_ip)
                        .ok_or(HostError::MissingMr(self.dest_ip))?;
                    (Some(Reth { va: mr.va, rkey: mr.rkey, dma_len: len as u32 }), None)
                }
            }
        };

        for i in 0..n {
            let lo = (i * mtu).min(wr.message.len());
            let hi = ((i + 1) * mtu).min(wr.message.len());
            let op = match first_reth {
                None => DataOp::Send,
                Some(reth) if i == 0 => DataOp::WriteFirst(reth),
                Some(_) if i + 1 == n => DataOp::WriteLast,
                Some(_) => DataOp::WriteMiddle,
            };
            self.pending.push_back(Segment {
                msg,
                op,
                payload: wr.message.slice(lo..hi),
                last: i + 1 == n,
                preamble: if i == 0 { preamble.clone() } else { None },
            });
        }
        Ok(msg)
    }

    /// Whether the pacer could emit something now or later.
    pub fn has_work(&self) -> bool {
        self.ready
            && (!self.preamble.is_empty()
                || self.cursor < self.inflight.len()
                || (self.inflight.len() < self.window as usize && !self.pending.is_empty()))
    }

    /// Earliest time the rate limiter allows the next packet.
    pub fn next_send_at(&self) -> f64 {
        self.next_send_at
    }

    /// Emits the next data packet and charges it to the rate limiter.
    pub fn next_packet(&mut self, now: f64, src_ip: Ipv4Addr, src_mac: MacAddr) -> Option<Packet> {
        if !self.ready {
            return None;
        }
        let p = self.next_packet_inner(src_ip, src_mac)?;
        let gap = p.wire_len() as f64 * 8.0 / self.rate_bps;
        self.next_send_at = self.next_send_at.max(now) + gap;
        Some(p)
    }

    fn next_packet_inner(&mut self, src_ip: Ipv4Addr, src_mac: MacAddr) -> Option<Packet> {
        if let Some(payload) = self.preamble.pop_front() {
            let psn = self.inflight[self.cursor].psn;
            self.stats.mr_updates_sent += 1;
            let op = DataOp::WriteFirst(Reth::default());
            return Some(self.data_packet(src_ip, src_mac, op, psn, false, false, payload));
        }
        if self.cursor == self.inflight.len() {
            if self.inflight.len() >= self.window as usize {
                return None;
            }
            let seg = self.pending.pop_front()?;
            let psn = self.sq_psn;
            self.sq_psn = psn.next();
            self.inflight.push_back(InFlight {
                psn,
                seg,
                sent: false,
                preamble_sent: false,
            });
        }
        let f = &mut self.inflight[self.cursor];
        if let (Some(pre), false) = (&f.seg.preamble, f.preamble_sent) {
            f.preamble_sent = true;
            self.preamble.extend(pre.iter().cloned());
            return self.next_packet_inner(src_ip, src_mac);
        }
        if f.sent {
            self.stats.retransmissions += 1;
        }
        f.sent = true;
        self.stats.data_sent += 1;
        let (op, psn, last, payload) = (f.seg.op, f.psn, f.seg.last, f.seg.payload.clone());
        self.cursor += 1;
        Some(self.data_packet(src_ip, src_mac, op, psn, last, last, payload))
    }

    #[allow(clippy::too_many_arguments)]
    fn data_packet(
        &self,
        src_ip: Ipv4Addr,
        src_mac: MacAddr,
        op: DataOp,
        psn: Psn,
        ack_req: bool,
        last: bool,
        payload: Bytes,
    ) -> Packet {
        Packet {
            eth: EthHeader {
                dst_mac: self.dest_mac,
                src_mac,
            },
            ip: IpHeader {
                src: src_ip,
                dst: self.dest_ip,
                ecn: Ecn::Ect0,
            },
            udp: UdpHeader {
                src_port: 0xC000 | (self.local_qpn.value() & 0x3FFF) as u16,
                dst_port: ROCE_UDP_PORT,
            },
            body: Body::Data(DataBody {
                op,
                bth: Bth {
                    ack_req,
                    last,
                    dst_qpn: self.dest_qpn,
                    psn,
                },
                payload,
            }),
        }
    }

    fn feedback(&self, src_ip: Ipv4Addr, src_mac: MacAddr, body: Body) -> Packet {
        Packet {
            eth: EthHeader {
                dst_mac: self.dest_mac,
                src_mac,
            },
            ip: IpHeader {
                src: src_ip,
                dst: self.dest_ip,
                ecn: Ecn::NotEct,
            },
            udp: UdpHeader {
                src_port: 0xC000 | (self.local_qpn.value() & 0x3FFF) as u16,
                dst_port: ROCE_UDP_PORT,
            },
            body,
        }
    }

    fn rewind(&mut self) {
        self.cursor = 0;
        self.preamble.clear();
        for f in &mut self.inflight {
            f.preamble_sent = false;
        }
    }

    /// Cumulative acknowledgement. Returns whether it advanced `acked_psn`.
    pub fn on_ack(&mut self, psn: Psn) -> bool {
        self.stats.acks_rx += 1;
        self.advance_to(psn)
    }

    fn advance_to(&mut self, psn: Psn) -> bool {
        if !psn_newer_exact(psn, self.acked_psn).unwrap_or(false) {
            return false;
        }
        let n = self.acked_psn.distance_to(psn) as usize;
        if n > self.inflight.len() {
            return false;
        }
        if n > self.cursor {
            self.preamble.clear();
        }
        for f in self.inflight.drain(..n) {
            if f.seg.last {
                self.sent_done.push(f.seg.msg);
            }
        }
        self.cursor = self.cursor.saturating_sub(n);
        self.acked_psn = psn;
        self.rto_backoff = 1;
        true
    }

    /// Go-back-N on a sequence NACK carrying the receiver's expected PSN.
    /// Returns whether anything was rewound or acknowledged.
    pub fn on_nack(&mut self, epsn: Psn) -> bool {
        self.stats.nacks_rx += 1;
        let acked = epsn.prev();
        let advanced = self.advance_to(acked);
        if self.acked_psn != acked {
            return false;
        }
        if !self.inflight.is_empty() {
            self.rewind();
            return true;
        }
        advanced
    }

    /// Returns true when the timer fired with work outstanding and a
    /// retransmission from `acked_psn + 1` has been started.
    pub fn rto_expire(&mut self, cfg: &HostConfig, token: u64) -> bool {
        if token != self.rto_token || !self.rto_armed {
            return false;
        }
        self.rto_armed = false;
        if self.inflight.is_empty() {
            return false;
        }
        self.stats.timeouts += 1;
        self.rewind();
        self.rto_backoff = (self.rto_backoff * 2).min(cfg.rto_max_factor);
        true
    }

    /// Current timeout including backoff.
    pub fn current_rto(&self) -> f64 {
        self.rto_s * f64::from(self.rto_backoff)
    }

    /// Halves the send rate, not below the floor.
    pub fn on_cnp(&mut self, cfg: &HostConfig) {
        self.stats.cnps_rx += 1;
        self.rate_bps = (self.rate_bps * 0.5).max(cfg.rate_min_bps);
        self.stats.min_rate_bps = self.stats.min_rate_bps.min(self.rate_bps);
    }

    /// Additive recovery step. Returns whether the rate is still below line rate.
    pub fn rate_recover(&mut self, cfg: &HostConfig) -> bool {
        self.rate_bps = (self.rate_bps + cfg.rate_ai_bps).min(cfg.line_rate_bps);
        self.rate_bps < cfg.line_rate_bps
    }

    /// Receive path. Returns the feedback packets to send.
    pub fn on_data(
        &mut self,
        cfg: &HostConfig,
        now: f64,
        p: &Packet,
        mrs: &mut std::collections::BTreeMap<u32, MemoryRegion>,
        src_ip: Ipv4Addr,
        src_mac: MacAddr,
    ) -> Vec<Packet> {
        let Some(d) = p.as_data() else {
            return Vec::new();
        };
        let mut out = Vec::new();
        if p.ip.ecn == Ecn::Ce && self.last_cnp_at.is_none_or(|t| now - t >= cfg.cnp_interval_s) {
            self.last_cnp_at = Some(now);
            self.stats.cnps_sent += 1;
            out.push(self.feedback(src_ip, src_mac, Body::Cnp(Bth::new(self.dest_qpn, d.bth.psn))));
        }
        if is_mr_update(d) {
            return out;
        }
        let psn = d.bth.psn;
        if psn == self.rq_psn {
            if !self.accept(d, mrs) {
                self.stats.rejected += 1;
                return out;
            }
            self.rq_psn = psn.next();
            self.nack_armed = false;
            self.stats.delivered_pkts += 1;
            self.stats.delivered_bytes += d.payload.len() as u64;
            if d.bth.last {
                let digest = std::mem::take(&mut self.rx_hasher).finalize().into();
                self.delivered.push(Delivered {
                    len: self.rx_len,
                    digest,
                });
                self.rx_len = 0;
                self.rx_write = None;
            }
            self.since_ack += 1;
            if self.since_ack >= cfg.ack_coalesce || d.bth.ack_req {
                self.since_ack = 0;
                out.push(self.ack(src_ip, src_mac, psn));
            }
        } else if psn_newer_exact(self.rq_psn, psn).unwrap_or(false) {
            self.stats.duplicates += 1;
            out.push(self.ack(src_ip, src_mac, self.rq_psn.prev()));
        } else {
            self.stats.out_of_order += 1;
            if !self.nack_armed {
                self.nack_armed = true;
                self.stats.nacks_sent += 1;
                out.push(self.feedback(src_ip, src_mac, Body::Nack(Bth::new(self.dest_qpn, self.rq_psn))));
            }
        }
        out
    }

    fn ack(&mut self, src_ip: Ipv4Addr, src_mac: MacAddr, psn: Psn) -> Packet {
        self.stats.acks_sent += 1;
        self.feedback(
            src_ip,
            src_mac,
            Body::Ack(AckBody {
                bth: Bth::new(self.dest_qpn, psn),
                kind: AckKind::Normal,
            }),
        )
    }

    /// Places an in-order payload. WRITEs must match a local memory region
    /// or the packet is discarded.
    fn accept(&mut self, d: &DataBody, mrs: &mut std::collections::BTreeMap<u32, MemoryRegion>) -> bool {
        match d.op {
            DataOp::Send => {}
            DataOp::WriteFirst(reth) => {
                let Some(mr) = mrs.get(&reth.rkey) else {
                    return false;
                };
                let Some(offset) = reth.va.checked_sub(mr.va) else {
                    return false;
                };
                let end = offset + u64::from(reth.dma_len);
                if end > mr.buffer.len() as u64 {
                    return false;
                }
                self.rx_write = Some(WriteTarget {
                    rkey: reth.rkey,
                    offset: offset as usize,
                });
            }
            DataOp::WriteMiddle | DataOp::WriteLast => {
                if self.rx_write.is_none() {
                    return false;
                }
            }
        }
        if let Some(t) = &mut self.rx_write {
            let Some(mr) = mrs.get_mut(&t.rkey) else {
                return false;
            };
            let end = t.offset + d.payload.len();
            if end > mr.buffer.len() {
                return false;
            }
            mr.buffer[t.offset..end].copy_from_slice(&d.payload);
            t.offset = end;
        }
        self.rx_hasher.update(&d.payload);
        self.rx_len += d.payload.len() as u64;
        true
    }
}

/// Hands the send role of a quiesced group from `old` to `new`: the new
/// source continues from the PSN its peers expect next, and the old source
/// now expects that same PSN.
pub fn switch_source(old: &mut QueuePair, new: &mut QueuePair) -> Result<(), HostError> {
    if !old.is_quiesced() || !new.is_quiesced() {
        return Err(HostError::NotQuiesced);
    }
    new.sq_psn = new.rq_psn;
    new.acked_psn = new.sq_psn.prev();
    old.rq_psn = old.sq_psn;
    old.nack_armed = false;
    Ok(())
}
