//! Structurally valid QUIC packets with random payload bytes.

use rand::Rng;

use crate::ingest::header::{write_varint, write_varint_with_len};
use crate::model::LongPacketType;

/// Smallest long header packet `long_packet` can build for the given CIDs.
pub fn long_header_len(ty: LongPacketType, dcid: &[u8], scid: &[u8]) -> usize {
    let token = usize::from(ty == LongPacketType::Initial);
    1 + 4 + 1 + dcid.len() + 1 + scid.len() + token + 2
}

/// A version 1 long header packet of exactly `total` bytes whose Length field
/// covers the rest of the packet.
pub fn long_packet<R: Rng>(rng: &mut R, ty: LongPacketType, dcid: &[u8], scid: &[u8], total: usize) -> Vec<u8> {
    let header = long_header_len(ty, dcid, scid);
    assert!(total > header, "long packet of {total} bytes cannot hold its {header}-byte header");
    let mut p = Vec::with_capacity(total);
    p.push(0xc0 | (ty.type_bits() << 4) | rng.gen_range(0..4u8));
    p.extend_from_slice(&1u32.to_be_bytes());
    p.push(dcid.len() as u8);
    p.extend_from_slice(dcid);
    p.push(scid.len() as u8);
    p.extend_from_slice(scid);
    if ty == LongPacketType::Initial {
        write_varint(&mut p, 0);
    }
    write_varint_with_len(&mut p, (total - header) as u64, 2);
    fill_random(rng, &mut p, total);
    p
}

/// A short header packet of exactly `total` bytes.
pub fn short_packet<R: Rng>(rng: &mut R, dcid: &[u8], total: usize) -> Vec<u8> {
    assert!(total > 1 + dcid.len(), "short packet of {total} bytes cannot hold its header");
    let mut p = Vec::with_capacity(total);
    p.push(0x40 | (rng.gen::<u8>() & 0x3f));
    p.extend_from_slice(dcid);
    fill_random(rng, &mut p, total);
    p
}

fn fill_random<R: Rng>(rng: &mut R, p: &mut Vec<u8>, total: usize) {
    let start = p.len();
    p.resize(total, 0);
    rng.fill(&mut p[start..]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_header_facts;
    use crate::model::HeaderForm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coalesced_datagram_parses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, s) = ([1u8; 8], [2u8; 8]);
        let mut dg = long_packet(&mut rng, LongPacketType::Initial, &d, &s, 150);
        dg.extend(long_packet(&mut rng, LongPacketType::Handshake, &d, &s, 1000));
        dg.extend(short_packet(&mut rng, &d, 50));
        let facts = parse_header_facts(&dg).unwrap();
        let lens: Vec<_> = facts.iter().map(|f| f.quic_packet_len).collect();
        assert_eq!(lens, [150, 1000, 50]);
        assert_eq!(facts[0].long_packet_type, Some(LongPacketType::Initial));
        assert_eq!(facts[1].long_packet_type, Some(LongPacketType::Handshake));
        assert_eq!(facts[2].header_form, HeaderForm::Short);
        assert_eq!(facts[0].scid.as_deref(), Some(&s[..]));
    }

    #[test]
    fn zero_rtt_first_byte() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = long_packet(&mut rng, LongPacketType::ZeroRtt, &[9; 8], &[7; 8], 400);
        assert_eq!(p[0] & 0xf0, 0b1101_0000);
        assert_eq!(parse_header_facts(&p).unwrap()[0].quic_packet_len, 400);
    }
}
