//! Packet model and bit-exact wire format.
//!
//! Every packet in the simulator is an Ethernet/IPv4/UDP frame. RoCE-style
//! traffic (data, ACK, NACK, CNP) uses UDP port 4791 and carries a 12-byte
//! BTH; registration envelopes use UDP port 4792 and carry an
//! [`EnvelopeBody`]. No ICRC is appended: hosts run with the ICRC check
//! disabled because switches rewrite headers in flight.

mod codec;
mod types;

pub use codec::{decode, encode};
pub use types::{GroupIp, MacAddr, Psn, Qpn, MULTICAST_QPN, PSN_MASK, PSN_MODULUS};

use std::net::Ipv4Addr;

use bytes::Bytes;
use thiserror::Error;

/// UDP destination port of RoCEv2 traffic.
pub const ROCE_UDP_PORT: u16 = 4791;
/// UDP destination port of registration envelopes.
pub const ENVELOPE_UDP_PORT: u16 = 4792;

pub const ETH_HEADER_LEN: usize = 14;
pub const IPV4_HEADER_LEN: usize = 20;
pub const UDP_HEADER_LEN: usize = 8;
pub const BTH_LEN: usize = 12;
pub const RETH_LEN: usize = 16;
pub const AETH_LEN: usize = 4;
/// Largest frame on the wire: 1500-byte MTU plus the Ethernet header.
pub const MAX_FRAME_LEN: usize = 1514;
/// UDP payload budget at MTU 1500.
pub const MAX_UDP_PAYLOAD: usize = 1500 - IPV4_HEADER_LEN - UDP_HEADER_LEN;

pub const ENVELOPE_META_LEN: usize = 8;
pub const ENVELOPE_ENTRY_LEN: usize = 8;
/// 8 + 183 * 8 = 1472, the full UDP payload budget.
pub const MAX_ENVELOPE_ENTRIES: usize = (MAX_UDP_PAYLOAD - ENVELOPE_META_LEN) / ENVELOPE_ENTRY_LEN;

/// Largest data payload that still fits a frame when a RETH is present.
pub const MAX_DATA_PAYLOAD: usize = MAX_UDP_PAYLOAD - BTH_LEN - RETH_LEN;

pub const OP_SEND: u8 = 0x04;
pub const OP_WRITE_FIRST: u8 = 0x06;
pub const OP_WRITE_MIDDLE: u8 = 0x07;
pub const OP_WRITE_LAST: u8 = 0x08;
pub const OP_ACK: u8 = 0x11;
pub const OP_CNP: u8 = 0x81;

pub const SYNDROME_ACK: u8 = 0x00;
pub const SYNDROME_NACK_SEQ: u8 = 0x60;
/// Out-of-band marker for registration confirmations.
pub const SYNDROME_CONFIRM: u8 = 0x7F;

pub const IP_PROTO_UDP: u8 = 17;
pub const ETHERTYPE_IPV4: u16 = 0x0800;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("serialized length {len} exceeds the {max}-byte frame limit")]
    OversizePayload { len: usize, max: usize },
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    #[error("unknown BTH opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("envelope must carry between 1 and {MAX_ENVELOPE_ENTRIES} entries, got {0}")]
    EnvelopeCount(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PacketKind {
    Data,
    Ack,
    Nack,
    Cnp,
    Envelope,
}

/// The two-bit ECN field of the IPv4 header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Ecn {
    #[default]
    NotEct,
    Ect1,
    Ect0,
    Ce,
}

impl Ecn {
    pub fn bits(self) -> u8 {
        match self {
            Ecn::NotEct => 0b00,
            Ecn::Ect1 => 0b01,
            Ecn::Ect0 => 0b10,
            Ecn::Ce => 0b11,
        }
    }

    pub fn from_bits(bits: u8) -> Self {
        match bits & 0b11 {
            0b00 => Ecn::NotEct,
            0b01 => Ecn::Ect1,
            0b10 => Ecn::Ect0,
            _ => Ecn::Ce,
        }
    }

    pub fn is_capable(self) -> bool {
        !matches!(self, Ecn::NotEct)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EthHeader {
    pub dst_mac: MacAddr,
    pub src_mac: MacAddr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IpHeader {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub ecn: Ecn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UdpHeader {
    pub src_port: u16,
    pub dst_port: u16,
}

/// Base transport header. The opcode is not stored here; it follows from
/// the [`Body`] variant.
///
/// `last` marks the final packet of a message (flags bit 6). `ack_req`
/// is flags bit 7.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bth {
    pub ack_req: bool,
    pub last: bool,
    pub dst_qpn: Qpn,
    pub psn: Psn,
}

impl Bth {
    pub fn new(dst_qpn: Qpn, psn: Psn) -> Self {
        Self {
            ack_req: false,
            last: false,
            dst_qpn,
            psn,
        }
    }
}

/// RDMA extended transport header, present on the first packet of a WRITE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Reth {
    pub va: u64,
    pub rkey: u32,
    pub dma_len: u32,
}

/// Remote memory region coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
pub struct MrInfo {
    pub va: u64,
    pub rkey: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataOp {
    Send,
    WriteFirst(Reth),
    WriteMiddle,
    WriteLast,
}

impl DataOp {
    pub fn opcode(&self) -> u8 {
        match self {
            DataOp::Send => OP_SEND,
            DataOp::WriteFirst(_) => OP_WRITE_FIRST,
            DataOp::WriteMiddle => OP_WRITE_MIDDLE,
            DataOp::WriteLast => OP_WRITE_LAST,
        }
    }

    pub fn reth(&self) -> Option<&Reth> {
        match self {
            DataOp::WriteFirst(reth) => Some(reth),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataBody {
    pub op: DataOp,
    pub bth: Bth,
    pub payload: Bytes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckKind {
    /// Cumulative acknowledgement, syndrome 0x00.
    Normal,
    /// Registration confirmation sent to the master, syndrome 0x7F.
    Confirmation,
}

impl AckKind {
    pub fn syndrome(self) -> u8 {
        match self {
            AckKind::Normal => SYNDROME_ACK,
            AckKind::Confirmation => SYNDROME_CONFIRM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AckBody {
    pub bth: Bth,
    pub kind: AckKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvelopeEntry {
    pub ip: Ipv4Addr,
    pub qpn: Qpn,
}

/// Registration payload. `count` on the wire is `entries.len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvelopeBody {
    pub seq: u16,
    pub total: u16,
    pub flags: u16,
    pub entries: Vec<EnvelopeEntry>,
}

impl EnvelopeBody {
    /// Set on the first envelope when it carries the group's initial
    /// acknowledged PSN. Bits 0..8 of `flags` then hold PSN bits 16..24 and
    /// the UDP source port holds PSN bits 0..16.
    pub const FLAG_INIT_PSN: u16 = 0x8000;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Data(DataBody),
    Ack(AckBody),
    /// Sequence-error NACK; `psn` is the receiver's expected PSN.
    Nack(Bth),
    Cnp(Bth),
    Envelope(EnvelopeBody),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub eth: EthHeader,
    pub ip: IpHeader,
    pub udp: UdpHeader,
    pub body: Body,
}

impl Packet {
    pub fn kind(&self) -> PacketKind {
        match &self.body {
            Body::Data(_) => PacketKind::Data,
            Body::Ack(_) => PacketKind::Ack,
            Body::Nack(_) => PacketKind::Nack,
            Body::Cnp(_) => PacketKind::Cnp,
            Body::Envelope(_) => PacketKind::Envelope,
        }
    }

    pub fn bth(&self) -> Option<&Bth> {
        match &self.body {
            Body::Data(d) => Some(&d.bth),
            Body::Ack(a) => Some(&a.bth),
            Body::Nack(b) | Body::Cnp(b) => Some(b),
            Body::Envelope(_) => None,
        }
    }

    pub fn bth_mut(&mut self) -> Option<&mut Bth> {
        match &mut self.body {
            Body::Data(d) => Some(&mut d.bth),
            Body::Ack(a) => Some(&mut a.bth),
            Body::Nack(b) | Body::Cnp(b) => Some(b),
            Body::Envelope(_) => None,
        }
    }

    pub fn psn(&self) -> Option<Psn> {
        self.bth().map(|b| b.psn)
    }

    pub fn as_data(&self) -> Option<&DataBody> {
        match &self.body {
            Body::Data(d) => Some(d),
            _ => None,
        }
    }

    pub fn as_envelope(&self) -> Option<&EnvelopeBody> {
        match &self.body {
            Body::Envelope(e) => Some(e),
            _ => None,
        }
    }

    /// Length of everything after the UDP header.
    pub fn udp_payload_len(&self) -> usize {
        match &self.body {
            Body::Data(d) => {
                BTH_LEN + d.op.reth().map_or(0, |_| RETH_LEN) + d.payload.len()
            }
            Body::Ack(_) | Body::Nack(_) => BTH_LEN + AETH_LEN,
            Body::Cnp(_) => BTH_LEN,
            Body::Envelope(e) => ENVELOPE_META_LEN + ENVELOPE_ENTRY_LEN * e.entries.len(),
        }
    }

    /// Serialized frame length in bytes.
    pub fn wire_len(&self) -> usize {
        ETH_HEADER_LEN + IPV4_HEADER_LEN + UDP_HEADER_LEN + self.udp_payload_len()
    }

    /// Initial acknowledged PSN carried by the first envelope of a group.
    pub fn envelope_init_ack_psn(&self) -> Option<Psn> {
        let env = self.as_envelope()?;
        if env.flags & EnvelopeBody::FLAG_INIT_PSN == 0 {
            return None;
        }
        let high = u32::from(env.flags & 0x00FF);
        Some(Psn::new((high << 16) | u32::from(self.udp.src_port)))
    }

    /// Stamps `psn` into the envelope flags and UDP source port. No-op on
    /// non-envelope packets.
    pub fn set_envelope_init_ack_psn(&mut self, psn: Psn) {
        if let Body::Envelope(env) = &mut self.body {
            let v = psn.value();
            env.flags = (env.flags & !0x00FF) | EnvelopeBody::FLAG_INIT_PSN | ((v >> 16) as u16);
            self.udp.src_port = (v & 0xFFFF) as u16;
        }
    }
}
