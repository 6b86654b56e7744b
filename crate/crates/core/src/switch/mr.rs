//! MR-update message: a WRITE-first packet with `ack_req = 0`, RETH
//! `dma_len = 0` and a payload of
//!
//! ```text
//! magic "MR" (2) | count (2) | count x { ip (4) | va (8) | rkey (4) }
//! ```

use std::net::Ipv4Addr;

use bytes::{BufMut, Bytes, BytesMut};

use super::SwitchError;
use crate::wire::{DataBody, DataOp, MrInfo, MAX_DATA_PAYLOAD};

pub const MR_MAGIC: [u8; 2] = *b"MR";
pub const MR_HEADER_LEN: usize = 4;
pub const MR_RECORD_LEN: usize = 16;
/// Records that fit one packet.
pub const MAX_MR_RECORDS: usize = (MAX_DATA_PAYLOAD - MR_HEADER_LEN) / MR_RECORD_LEN;

pub fn is_mr_update(d: &DataBody) -> bool {
    matches!(d.op, DataOp::WriteFirst(reth) if reth.dma_len == 0)
        && !d.bth.ack_req
        && d.payload.starts_with(&MR_MAGIC)
}

/// Encodes at most [`MAX_MR_RECORDS`] records.
pub fn encode_mr_list(records: &[(Ipv4Addr, MrInfo)]) -> Result<Bytes, SwitchError> {
    if records.len() > MAX_MR_RECORDS {
        return Err(SwitchError::MalformedMrList("too many records for one packet"));
    }
    let mut b = BytesMut::with_capacity(MR_HEADER_LEN + records.len() * MR_RECORD_LEN);
    b.put_slice(&MR_MAGIC);
    b.put_u16(records.len() as u16);
    for (ip, mr) in records {
        b.put_u32(u32::from(*ip));
        b.put_u64(mr.va);
        b.put_u32(mr.rkey);
    }
    Ok(b.freeze())
}

pub fn decode_mr_list(payload: &[u8]) -> Result<Vec<(Ipv4Addr, MrInfo)>, SwitchError> {
    if payload.len() < MR_HEADER_LEN || payload[..2] != MR_MAGIC {
        return Err(SwitchError::MalformedMrList("missing header"));
    }
    let count = usize::from(u16::from_be_bytes([payload[2], payload[3]]));
    let body = &payload[MR_HEADER_LEN..];
    if body.len() != count * MR_RECORD_LEN {
        return Err(SwitchError::MalformedMrList("record count disagrees with length"));
    }
    Ok(body
        .chunks_exact(MR_RECORD_LEN)
        .map(|r| {
            let ip = Ipv4Addr::from(u32::from_be_bytes(r[0..4].try_into().unwrap()));
            let va = u64::from_be_bytes(r[4..12].try_into().unwrap());
            let rkey = u32::from_be_bytes(r[12..16].try_into().unwrap());
            (ip, MrInfo { va, rkey })
        })
        .collect())
}
