//! Classic libpcap file reading and writing, plus just enough link/IP/UDP
//! decoding to pull UDP payloads out of captured frames.

use std::io::{self, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};

use crate::error::IngestError;
use crate::model::Micros;

const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
const FILE_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW: u32 = 101;
pub const LINKTYPE_LINUX_SLL: u32 = 113;
pub const LINKTYPE_IPV4: u32 = 228;
pub const LINKTYPE_IPV6: u32 = 229;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88a8;
const IPPROTO_UDP: u8 = 17;

/// A UDP datagram lifted out of the capture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDatagram {
    /// Ordinal of the frame (or event line) within the input.
    pub index: u64,
    pub timestamp_us: Micros,
    pub src: SocketAddr,
    pub dst: SocketAddr,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp_us: Micros,
    pub data: Vec<u8>,
}

pub struct PcapReader<R> {
    inner: R,
    swapped: bool,
    nanos: bool,
    link_type: u32,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, IngestError> {
        let mut hdr = [0u8; FILE_HEADER_LEN];
        inner.read_exact(&mut hdr).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                IngestError::malformed("pcap header", "file shorter than the pcap global header")
            } else {
                IngestError::Io(e)
            }
        })?;
        let magic_le = u32::from_le_bytes([hdr[0], hdr[1], hdr[2], hdr[3]]);
        let (swapped, nanos) = match magic_le {
            MAGIC_MICROS => (false, false),
            MAGIC_NANOS => (false, true),
            m if m.swap_bytes() == MAGIC_MICROS => (true, false),
            m if m.swap_bytes() == MAGIC_NANOS => (true, true),
            m => {
                return Err(IngestError::malformed("pcap header", format!("bad magic {m:#010x}")));
            }
        };
        let mut r = PcapReader { inner, swapped, nanos, link_type: 0 };
        r.link_type = r.u32_at(&hdr, 20) & 0x0fff_ffff;
        match r.link_type {
            LINKTYPE_ETHERNET | LINKTYPE_RAW | LINKTYPE_LINUX_SLL | LINKTYPE_IPV4 | LINKTYPE_IPV6 => {}
            other => return Err(IngestError::UnsupportedLinkType(other)),
        }
        Ok(r)
    }

    pub fn link_type(&self) -> u32 {
        self.link_type
    }

    fn u32_at(&self, buf: &[u8], at: usize) -> u32 {
        let b = [buf[at], buf[at + 1], buf[at + 2], buf[at + 3]];
        if self.swapped {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        }
    }

    pub fn next_frame(&mut self) -> Result<Option<Frame>, IngestError> {
        let mut hdr = [0u8; RECORD_HEADER_LEN];
        match read_full(&mut self.inner, &mut hdr)? {
            0 => return Ok(None),
            RECORD_HEADER_LEN => {}
            _ => return Err(IngestError::malformed("pcap record", "truncated record header")),
        }
        let secs = u64::from(self.u32_at(&hdr, 0));
        let frac = u64::from(self.u32_at(&hdr, 4));
        let incl = self.u32_at(&hdr, 8) as usize;
        if incl > 256 * 1024 {
            return Err(IngestError::malformed("pcap record", format!("captured length {incl} is implausible")));
        }
        let mut data = vec![0u8; incl];
        if read_full(&mut self.inner, &mut data)? != incl {
            return Err(IngestError::malformed("pcap record", "truncated packet data"));
        }
        let sub = if self.nanos { frac / 1000 } else { frac };
        Ok(Some(Frame { timestamp_us: secs * 1_000_000 + sub, data }))
    }

    /// Decodes a frame down to its UDP payload; `None` for anything that is not
    /// an unfragmented UDP datagram.
    pub fn decode_udp(&self, frame: &Frame, index: u64) -> Option<RawDatagram> {
        let ip = match self.link_type {
            LINKTYPE_ETHERNET => strip_ethernet(&frame.data)?,
            LINKTYPE_LINUX_SLL => strip_sll(&frame.data)?,
            _ => &frame.data[..],
        };
        let (src_ip, dst_ip, l4) = strip_ip(ip)?;
        let (sport, dport, payload) = strip_udp(l4)?;
        Some(RawDatagram {
            index,
            timestamp_us: frame.timestamp_us,
            src: SocketAddr::new(src_ip, sport),
            dst: SocketAddr::new(dst_ip, dport),
            payload: payload.to_vec(),
        })
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn be16(b: &[u8], at: usize) -> Option<u16> {
    Some(u16::from_be_bytes([*b.get(at)?, *b.get(at + 1)?]))
}

fn strip_ethernet(frame: &[u8]) -> Option<&[u8]> {
    let mut off = 12;
    let mut ethertype = be16(frame, off)?;
    while ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
        off += 4;
        ethertype = be16(frame, off)?;
    }
    match ethertype {
        ETHERTYPE_IPV4 | ETHERTYPE_IPV6 => frame.get(off + 2..),
        _ => None,
    }
}

fn strip_sll(frame: &[u8]) -> Option<&[u8]> {
    match be16(frame, 14)? {
        ETHERTYPE_IPV4 | ETHERTYPE_IPV6 => frame.get(16..),
        _ => None,
    }
}

fn strip_ip(ip: &[u8]) -> Option<(IpAddr, IpAddr, &[u8])> {
    match ip.first()? >> 4 {
        4 => {
            let ihl = usize::from(ip[0] & 0x0f) * 4;
            if ihl < 20 || ip.len() < ihl {
                return None;
            }
            let total = usize::from(be16(ip, 2)?).min(ip.len());
            let frag = be16(ip, 6)?;
            // more-fragments flag or a non-zero offset
            if frag & 0x3fff != 0 || ip[9] != IPPROTO_UDP || total < ihl {
                return None;
            }
            let src = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
            let dst = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
            Some((src.into(), dst.into(), &ip[ihl..total]))
        }
        6 => {
            if ip.len() < 40 {
                return None;
            }
            let payload_len = usize::from(be16(ip, 4)?);
            let mut src = [0u8; 16];
            let mut dst = [0u8; 16];
            src.copy_from_slice(&ip[8..24]);
            dst.copy_from_slice(&ip[24..40]);
            let end = (40 + payload_len).min(ip.len());
            let mut next = ip[6];
            let mut off = 40;
            loop {
                match next {
                    IPPROTO_UDP => break,
                    // hop-by-hop, routing, destination options
                    0 | 43 | 60 => {
                        let hdr = ip.get(off..off + 2)?;
                        next = hdr[0];
                        off += (usize::from(hdr[1]) + 1) * 8;
                    }
                    _ => return None,
                }
            }
            if off > end {
                return None;
            }
            Some((Ipv6Addr::from(src).into(), Ipv6Addr::from(dst).into(), &ip[off..end]))
        }
        _ => None,
    }
}

fn strip_udp(l4: &[u8]) -> Option<(u16, u16, &[u8])> {
    if l4.len() < 8 {
        return None;
    }
    let sport = be16(l4, 0)?;
    let dport = be16(l4, 2)?;
    let len = usize::from(be16(l4, 4)?);
    if len < 8 {
        return None;
    }
    Some((sport, dport, &l4[8..len.min(l4.len())]))
}

/// Writes Ethernet-framed UDP datagrams as a microsecond-resolution pcap.
pub struct PcapWriter<W> {
    inner: W,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W) -> io::Result<Self> {
        let mut hdr = Vec::with_capacity(FILE_HEADER_LEN);
        hdr.extend_from_slice(&MAGIC_MICROS.to_le_bytes());
        hdr.extend_from_slice(&2u16.to_le_bytes());
        hdr.extend_from_slice(&4u16.to_le_bytes());
        hdr.extend_from_slice(&0i32.to_le_bytes());
        hdr.extend_from_slice(&0u32.to_le_bytes());
        hdr.extend_from_slice(&65_535u32.to_le_bytes());
        hdr.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
        inner.write_all(&hdr)?;
        Ok(PcapWriter { inner })
    }

    pub fn write_frame(&mut self, timestamp_us: Micros, frame: &[u8]) -> io::Result<()> {
        let mut rec = Vec::with_capacity(RECORD_HEADER_LEN);
        rec.extend_from_slice(&((timestamp_us / 1_000_000) as u32).to_le_bytes());
        rec.extend_from_slice(&((timestamp_us % 1_000_000) as u32).to_le_bytes());
        rec.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        rec.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        self.inner.write_all(&rec)?;
        self.inner.write_all(frame)
    }

    pub fn write_udp(&mut self, timestamp_us: Micros, src: SocketAddr, dst: SocketAddr, payload: &[u8]) -> io::Result<()> {
        let frame = build_udp_frame(src, dst, payload)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "mixed address families"))?;
        self.write_frame(timestamp_us, &frame)
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

fn checksum_add(mut sum: u32, data: &[u8]) -> u32 {
    let mut chunks = data.chunks_exact(2);
    for c in &mut chunks {
        sum += u32::from(u16::from_be_bytes([c[0], c[1]]));
    }
    if let [last] = chunks.remainder() {
        sum += u32::from(*last) << 8;
    }
    sum
}

fn checksum_finish(mut sum: u32) -> u16 {
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Ethernet + IPv4/IPv6 + UDP frame around `payload`.
pub fn build_udp_frame(src: SocketAddr, dst: SocketAddr, payload: &[u8]) -> Option<Vec<u8>> {
    let udp_len = 8 + payload.len();
    let mut udp = Vec::with_capacity(udp_len);
    udp.extend_from_slice(&src.port().to_be_bytes());
    udp.extend_from_slice(&dst.port().to_be_bytes());
    udp.extend_from_slice(&(udp_len as u16).to_be_bytes());
    udp.extend_from_slice(&[0, 0]);
    udp.extend_from_slice(payload);

    let mut frame = vec![0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01];
    match (src.ip(), dst.ip()) {
        (IpAddr::V4(s), IpAddr::V4(d)) => {
            frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
            let mut ip = vec![0x45, 0];
            ip.extend_from_slice(&((20 + udp_len) as u16).to_be_bytes());
            ip.extend_from_slice(&[0, 0, 0x40, 0, 64, IPPROTO_UDP, 0, 0]);
            ip.extend_from_slice(&s.octets());
            ip.extend_from_slice(&d.octets());
            let c = checksum_finish(checksum_add(0, &ip));
            ip[10..12].copy_from_slice(&c.to_be_bytes());
            frame.extend_from_slice(&ip);
        }
        (IpAddr::V6(s), IpAddr::V6(d)) => {
            frame.extend_from_slice(&ETHERTYPE_IPV6.to_be_bytes());
            let mut pseudo = Vec::with_capacity(40);
            pseudo.extend_from_slice(&s.octets());
            pseudo.extend_from_slice(&d.octets());
            pseudo.extend_from_slice(&(udp_len as u32).to_be_bytes());
            pseudo.extend_from_slice(&[0, 0, 0, IPPROTO_UDP]);
            let mut c = checksum_finish(checksum_add(checksum_add(0, &pseudo), &udp));
            if c == 0 {
                c = 0xffff;
            }
            udp[6..8].copy_from_slice(&c.to_be_bytes());
            frame.extend_from_slice(&[0x60, 0, 0, 0]);
            frame.extend_from_slice(&(udp_len as u16).to_be_bytes());
            frame.extend_from_slice(&[IPPROTO_UDP, 64]);
            frame.extend_from_slice(&s.octets());
            frame.extend_from_slice(&d.octets());
        }
        _ => return None,
    }
    frame.extend_from_slice(&udp);
    Some(frame)
}
