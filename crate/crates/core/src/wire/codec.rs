use std::net::Ipv4Addr;

use bytes::Bytes;

use super::*;

/// Serializes `p` into a frame.
///
/// Layout: Ethernet (14) | IPv4 (20, no options) | UDP (8) | then either
/// BTH (12) [+ RETH (16) | AETH (4)] + payload, or the envelope body.
pub fn encode(p: &Packet) -> Result<Vec<u8>, WireError> {
    if let Body::Envelope(env) = &p.body {
        if env.entries.is_empty() {
            return Err(WireError::EnvelopeCount(0));
        }
    }
    let len = p.wire_len();
    if len > MAX_FRAME_LEN {
        return Err(WireError::OversizePayload {
            len,
            max: MAX_FRAME_LEN,
        });
    }

    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(&p.eth.dst_mac.0);
    out.extend_from_slice(&p.eth.src_mac.0);
    out.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

    let udp_len = UDP_HEADER_LEN + p.udp_payload_len();
    let ip_total = (IPV4_HEADER_LEN + udp_len) as u16;
    let mut ip = [0u8; IPV4_HEADER_LEN];
    ip[0] = 0x45;
    ip[1] = p.ip.ecn.bits();
    ip[2..4].copy_from_slice(&ip_total.to_be_bytes());
    // identification = 0, DF set
    ip[6] = 0x40;
    ip[8] = 64;
    ip[9] = IP_PROTO_UDP;
    ip[12..16].copy_from_slice(&p.ip.src.octets());
    ip[16..20].copy_from_slice(&p.ip.dst.octets());
    let csum = ipv4_checksum(&ip);
    ip[10..12].copy_from_slice(&csum.to_be_bytes());
    out.extend_from_slice(&ip);

    out.extend_from_slice(&p.udp.src_port.to_be_bytes());
    out.extend_from_slice(&p.udp.dst_port.to_be_bytes());
    out.extend_from_slice(&(udp_len as u16).to_be_bytes());
    out.extend_from_slice(&[0, 0]);

    match &p.body {
        Body::Data(d) => {
            put_bth(&mut out, d.op.opcode(), &d.bth);
            if let Some(reth) = d.op.reth() {
                out.extend_from_slice(&reth.va.to_be_bytes());
                out.extend_from_slice(&reth.rkey.to_be_bytes());
                out.extend_from_slice(&reth.dma_len.to_be_bytes());
            }
            out.extend_from_slice(&d.payload);
        }
        Body::Ack(a) => {
            put_bth(&mut out, OP_ACK, &a.bth);
            out.extend_from_slice(&[a.kind.syndrome(), 0, 0, 0]);
        }
        Body::Nack(bth) => {
            put_bth(&mut out, OP_ACK, bth);
            out.extend_from_slice(&[SYNDROME_NACK_SEQ, 0, 0, 0]);
        }
        Body::Cnp(bth) => put_bth(&mut out, OP_CNP, bth),
        Body::Envelope(env) => {
            out.extend_from_slice(&env.seq.to_be_bytes());
            out.extend_from_slice(&env.total.to_be_bytes());
            out.extend_from_slice(&(env.entries.len() as u16).to_be_bytes());
            out.extend_from_slice(&env.flags.to_be_bytes());
            for e in &env.entries {
                out.extend_from_slice(&e.ip.octets());
                out.extend_from_slice(&u24(e.qpn.value()));
                out.push(0);
            }
        }
    }
    debug_assert_eq!(out.len(), len);
    Ok(out)
}

/// Parses a frame produced by [`encode`].
///
/// Classification is by UDP destination port first (4791 or 4792), then by
/// BTH opcode and, for opcode 0x11, by AETH syndrome.
pub fn decode(bytes: &[u8]) -> Result<Packet, WireError> {
    let mut r = Reader::new(bytes);

    let eth = r.take(ETH_HEADER_LEN, "truncated Ethernet header")?;
    let eth_header = EthHeader {
        dst_mac: MacAddr(eth[0..6].try_into().unwrap()),
        src_mac: MacAddr(eth[6..12].try_into().unwrap()),
    };
    if u16::from_be_bytes([eth[12], eth[13]]) != ETHERTYPE_IPV4 {
        return Err(WireError::Malformed("ethertype is not IPv4"));
    }

    let ip = r.take(IPV4_HEADER_LEN, "truncated IPv4 header")?;
    if ip[0] != 0x45 {
        return Err(WireError::Malformed("IPv4 version/IHL must be 0x45"));
    }
    if ip[9] != IP_PROTO_UDP {
        return Err(WireError::Malformed("IP protocol is not UDP"));
    }
    if ipv4_checksum(ip) != 0 {
        return Err(WireError::Malformed("IPv4 header checksum mismatch"));
    }
    let ip_total = usize::from(u16::from_be_bytes([ip[2], ip[3]]));
    if ip_total != bytes.len() - ETH_HEADER_LEN {
        return Err(WireError::Malformed("IPv4 total length disagrees with frame"));
    }
    let ip_header = IpHeader {
        src: Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]),
        dst: Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]),
        ecn: Ecn::from_bits(ip[1]),
    };

    let udp = r.take(UDP_HEADER_LEN, "truncated UDP header")?;
    let udp_header = UdpHeader {
        src_port: u16::from_be_bytes([udp[0], udp[1]]),
        dst_port: u16::from_be_bytes([udp[2], udp[3]]),
    };
    let udp_len = usize::from(u16::from_be_bytes([udp[4], udp[5]]));
    if udp_len != ip_total - IPV4_HEADER_LEN {
        return Err(WireError::Malformed("UDP length disagrees with IPv4 length"));
    }

    let body = match udp_header.dst_port {
        ENVELOPE_UDP_PORT => decode_envelope(&mut r)?,
        ROCE_UDP_PORT => decode_roce(&mut r)?,
        _ => return Err(WireError::Malformed("unknown UDP destination port")),
    };
    if !r.is_empty() {
        return Err(WireError::Malformed("trailing bytes after packet body"));
    }

    Ok(Packet {
        eth: eth_header,
        ip: ip_header,
        udp: udp_header,
        body,
    })
}

fn decode_envelope(r: &mut Reader<'_>) -> Result<Body, WireError> {
    let meta = r.take(ENVELOPE_META_LEN, "truncated envelope metadata")?;
    let seq = u16::from_be_bytes([meta[0], meta[1]]);
    let total = u16::from_be_bytes([meta[2], meta[3]]);
    let count = usize::from(u16::from_be_bytes([meta[4], meta[5]]));
    let flags = u16::from_be_bytes([meta[6], meta[7]]);
    if count == 0 || count > MAX_ENVELOPE_ENTRIES {
        return Err(WireError::EnvelopeCount(count));
    }
    if r.remaining() != count * ENVELOPE_ENTRY_LEN {
        return Err(WireError::Malformed("envelope count disagrees with body length"));
    }
    let entries = (0..count)
        .map(|_| {
            let e = r.take(ENVELOPE_ENTRY_LEN, "truncated envelope entry")?;
            Ok(EnvelopeEntry {
                ip: Ipv4Addr::new(e[0], e[1], e[2], e[3]),
                qpn: Qpn::new(read_u24(&e[4..7])),
            })
        })
        .collect::<Result<Vec<_>, WireError>>()?;
    Ok(Body::Envelope(EnvelopeBody {
        seq,
        total,
        flags,
        entries,
    }))
}

fn decode_roce(r: &mut Reader<'_>) -> Result<Body, WireError> {
    let b = r.take(BTH_LEN, "truncated BTH")?;
    let opcode = b[0];
    let bth = Bth {
        ack_req: b[1] & 0x80 != 0,
        last: b[1] & 0x40 != 0,
        dst_qpn: Qpn::new(read_u24(&b[4..7])),
        psn: Psn::new(read_u24(&b[8..11])),
    };
    let body = match opcode {
        OP_SEND | OP_WRITE_MIDDLE | OP_WRITE_LAST | OP_WRITE_FIRST => {
            let op = match opcode {
                OP_SEND => DataOp::Send,
                OP_WRITE_MIDDLE => DataOp::WriteMiddle,
                OP_WRITE_LAST => DataOp::WriteLast,
                _ => {
                    let reth = r.take(RETH_LEN, "truncated RETH")?;
                    DataOp::WriteFirst(Reth {
                        va: u64::from_be_bytes(reth[0..8].try_into().unwrap()),
                        rkey: u32::from_be_bytes(reth[8..12].try_into().unwrap()),
                        dma_len: u32::from_be_bytes(reth[12..16].try_into().unwrap()),
                    })
                }
            };
            let payload = Bytes::copy_from_slice(r.rest());
            Body::Data(DataBody { op, bth, payload })
        }
        OP_ACK => {
            let aeth = r.take(AETH_LEN, "truncated AETH")?;
            match aeth[0] {
                SYNDROME_ACK => Body::Ack(AckBody {
                    bth,
                    kind: AckKind::Normal,
                }),
                SYNDROME_CONFIRM => Body::Ack(AckBody {
                    bth,
                    kind: AckKind::Confirmation,
                }),
                SYNDROME_NACK_SEQ => Body::Nack(bth),
                _ => return Err(WireError::Malformed("unsupported AETH syndrome")),
            }
        }
        OP_CNP => Body::Cnp(bth),
        other => return Err(WireError::UnknownOpcode(other)),
    };
    Ok(body)
}

fn put_bth(out: &mut Vec<u8>, opcode: u8, bth: &Bth) {
    let mut flags = 0u8;
    if bth.ack_req {
        flags |= 0x80;
    }
    if bth.last {
        flags |= 0x40;
    }
    out.push(opcode);
    out.push(flags);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&u24(bth.dst_qpn.value()));
    out.push(0);
    out.extend_from_slice(&u24(bth.psn.value()));
    out.push(0);
}

fn u24(v: u32) -> [u8; 3] {
    let b = v.to_be_bytes();
    [b[1], b[2], b[3]]
}

fn read_u24(b: &[u8]) -> u32 {
    u32::from_be_bytes([0, b[0], b[1], b[2]])
}

/// One's-complement sum over the header. Returns 0 when run over a header
/// whose checksum field is already correct.
fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks(2)
        .map(|c| u32::from(u16::from_be_bytes([c[0], c[1]])))
        .sum();
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Malformed(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn is_empty(&self) -> bool {
        self.remaining() == 0
    }
}
