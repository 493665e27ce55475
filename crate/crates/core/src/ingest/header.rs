//! Walks the visible QUIC framing of a UDP payload (RFC 8999 invariants plus
//! the v1 long header layout) without touching protected fields.

use crate::error::MalformedHeader;
use crate::model::{HeaderForm, LongPacketType};

pub const HEADER_FORM_BIT: u8 = 0x80;
pub const FIXED_BIT: u8 = 0x40;

/// What a passive observer learns about one QUIC packet inside a datagram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderFacts {
    pub header_form: HeaderForm,
    pub long_packet_type: Option<LongPacketType>,
    pub quic_packet_len: u32,
    pub version: Option<u32>,
    /// Destination and source connection IDs, long headers only.
    pub dcid: Option<Vec<u8>>,
    pub scid: Option<Vec<u8>>,
}

/// Reads a QUIC variable-length integer, returning the value and its encoded size.
pub fn read_varint(buf: &[u8], offset: usize) -> Result<(u64, usize), MalformedHeader> {
    let first = *buf.get(offset).ok_or(MalformedHeader::Truncated(offset))?;
    let len = 1usize << (first >> 6);
    let bytes = buf.get(offset..offset + len).ok_or(MalformedHeader::Truncated(offset))?;
    let mut v = u64::from(first & 0x3f);
    for b in &bytes[1..] {
        v = (v << 8) | u64::from(*b);
    }
    Ok((v, len))
}

/// Appends `v` using an encoding of exactly `len` bytes (1, 2, 4 or 8).
pub fn write_varint_with_len(out: &mut Vec<u8>, v: u64, len: usize) {
    let (prefix, max) = match len {
        1 => (0x00u8, 63u64),
        2 => (0x40, 16_383),
        4 => (0x80, 1_073_741_823),
        8 => (0xc0, 4_611_686_018_427_387_903),
        _ => panic!("invalid varint length {len}"),
    };
    assert!(v <= max, "varint {v} does not fit in {len} bytes");
    let be = v.to_be_bytes();
    let start = 8 - len;
    out.push(be[start] | prefix);
    out.extend_from_slice(&be[start + 1..]);
}

pub fn write_varint(out: &mut Vec<u8>, v: u64) {
    let len = match v {
        0..=63 => 1,
        64..=16_383 => 2,
        16_384..=1_073_741_823 => 4,
        _ => 8,
    };
    write_varint_with_len(out, v, len);
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], MalformedHeader> {
    let s = buf.get(*pos..*pos + n).ok_or(MalformedHeader::Truncated(*pos))?;
    *pos += n;
    Ok(s)
}

fn take_cid(buf: &[u8], pos: &mut usize) -> Result<Vec<u8>, MalformedHeader> {
    let len_at = *pos;
    let len = usize::from(*buf.get(len_at).ok_or(MalformedHeader::Truncated(len_at))?);
    *pos += 1;
    if *pos + len > buf.len() {
        return Err(MalformedHeader::CidOverrun { offset: len_at, len });
    }
    Ok(take(buf, pos, len)?.to_vec())
}

/// Splits a UDP payload into its coalesced QUIC packets.
///
/// Long headers are delimited by their Length field (Retry and Version
/// Negotiation consume the remainder). A short header can only be the last
/// packet and consumes the remainder. Bytes after a long packet that do not
/// carry the fixed bit are treated as padding and belong to no packet.
pub fn parse_header_facts(payload: &[u8]) -> Result<Vec<HeaderFacts>, MalformedHeader> {
    if payload.is_empty() {
        return Err(MalformedHeader::Empty);
    }
    if payload[0] & FIXED_BIT == 0 && payload[0] & HEADER_FORM_BIT == 0 {
        return Err(MalformedHeader::NotQuic);
    }
    let mut packets = Vec::new();
    let mut offset = 0usize;
    while offset < payload.len() {
        let first = payload[offset];
        if offset > 0 && first & FIXED_BIT == 0 {
            break;
        }
        if first & HEADER_FORM_BIT == 0 {
            packets.push(HeaderFacts {
                header_form: HeaderForm::Short,
                long_packet_type: None,
                quic_packet_len: (payload.len() - offset) as u32,
                version: None,
                dcid: None,
                scid: None,
            });
            break;
        }

        let mut pos = offset + 1;
        let vbytes = take(payload, &mut pos, 4)?;
        let version = u32::from_be_bytes([vbytes[0], vbytes[1], vbytes[2], vbytes[3]]);
        let dcid = take_cid(payload, &mut pos)?;
        let scid = take_cid(payload, &mut pos)?;
        let ptype = LongPacketType::from_first_byte(first);

        let end = if version == 0 || ptype == LongPacketType::Retry {
            payload.len()
        } else {
            if ptype == LongPacketType::Initial {
                let (token_len, n) = read_varint(payload, pos)?;
                pos += n;
                if token_len as usize > payload.len().saturating_sub(pos) {
                    return Err(MalformedHeader::LengthOverrun {
                        offset: pos,
                        claimed: token_len,
                        remaining: payload.len() - pos,
                    });
                }
                pos += token_len as usize;
            }
            let (length, n) = read_varint(payload, pos)?;
            let at = pos;
            pos += n;
            let remaining = payload.len() - pos;
            if length as usize > remaining {
                return Err(MalformedHeader::LengthOverrun { offset: at, claimed: length, remaining });
            }
            pos + length as usize
        };

        packets.push(HeaderFacts {
            header_form: HeaderForm::Long,
            long_packet_type: Some(ptype),
            quic_packet_len: (end - offset) as u32,
            version: Some(version),
            dcid: Some(dcid),
            scid: Some(scid),
        });
        offset = end;
    }
    Ok(packets)
}
