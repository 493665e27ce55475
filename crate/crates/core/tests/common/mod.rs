//! Hand-assembled QUIC datagrams for fixtures, independent of the generator.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::net::SocketAddr;

use quiclens::ingest::{demux_all, Capture, RawDatagram};

pub const CLIENT: &str = "10.1.0.2:50123";
pub const SERVER: &str = "203.0.113.9:443";
const CLIENT_CID: [u8; 8] = [0xc1; 8];
const SERVER_CID: [u8; 8] = [0x5e; 8];

#[derive(Debug, Clone, Copy)]
pub enum Pkt {
    Initial(usize),
    Handshake(usize),
    ZeroRtt(usize),
    Short(usize),
}

impl Pkt {
    pub fn len(self) -> usize {
        match self {
            Pkt::Initial(n) | Pkt::Handshake(n) | Pkt::ZeroRtt(n) | Pkt::Short(n) => n,
        }
    }
}

fn encode(p: Pkt, upstream: bool) -> Vec<u8> {
    let (dcid, scid) = if upstream { (SERVER_CID, CLIENT_CID) } else { (CLIENT_CID, SERVER_CID) };
    let (ty, total) = match p {
        Pkt::Short(n) => {
            let mut v = vec![0x40];
            v.extend_from_slice(&dcid);
            v.resize(n, 0xab);
            return v;
        }
        Pkt::Initial(n) => (0u8, n),
        Pkt::ZeroRtt(n) => (1, n),
        Pkt::Handshake(n) => (2, n),
    };
    let mut v = vec![0xc0 | (ty << 4)];
    v.extend_from_slice(&1u32.to_be_bytes());
    v.push(8);
    v.extend_from_slice(&dcid);
    v.push(8);
    v.extend_from_slice(&scid);
    if ty == 0 {
        v.push(0);
    }
    let rest = total - v.len() - 2;
    v.extend_from_slice(&(0x4000u16 | rest as u16).to_be_bytes());
    v.resize(total, 0xcd);
    v
}

#[derive(Default)]
pub struct Fixture {
    pub datagrams: Vec<RawDatagram>,
}

impl Fixture {
    fn push(&mut self, t_us: u64, upstream: bool, pkts: &[Pkt]) -> &mut Self {
        let (c, s): (SocketAddr, SocketAddr) = (CLIENT.parse().unwrap(), SERVER.parse().unwrap());
        let payload = pkts.iter().flat_map(|&p| encode(p, upstream)).collect();
        let (src, dst) = if upstream { (c, s) } else { (s, c) };
        let index = self.datagrams.len() as u64;
        self.datagrams.push(RawDatagram { index, timestamp_us: t_us, src, dst, payload });
        self
    }

    /// Client to server datagram.
    pub fn c(&mut self, t_us: u64, pkts: &[Pkt]) -> &mut Self {
        self.push(t_us, true, pkts)
    }

    /// Server to client datagram.
    pub fn s(&mut self, t_us: u64, pkts: &[Pkt]) -> &mut Self {
        self.push(t_us, false, pkts)
    }

    /// A run of single-packet short datagrams `gap_us` apart starting at `t_us`;
    /// returns the time of the last one.
    pub fn burst(&mut self, upstream: bool, t_us: u64, gap_us: u64, lens: &[usize]) -> u64 {
        let mut t = t_us;
        for (i, &n) in lens.iter().enumerate() {
            if i > 0 {
                t += gap_us;
            }
            self.push(t, upstream, &[Pkt::Short(n)]);
        }
        t
    }

    /// The usual 1-RTT handshake starting at `t0`, MTU 1200 both ways; returns
    /// the time the client sends its Finished flight.
    pub fn handshake(&mut self, t0: u64, rtt_us: u64) -> u64 {
        self.c(t0, &[Pkt::Initial(1200)]);
        self.s(t0 + rtt_us, &[Pkt::Initial(150), Pkt::Handshake(1050)]);
        self.s(t0 + rtt_us + 400, &[Pkt::Handshake(800)]);
        let fin = t0 + rtt_us + 5_000;
        self.c(fin, &[Pkt::Initial(100), Pkt::Handshake(70), Pkt::Short(40)]);
        self.s(fin + rtt_us, &[Pkt::Handshake(60), Pkt::Short(30)]);
        fin
    }

    pub fn capture(&self) -> Capture {
        demux_all(self.datagrams.clone())
    }

    pub fn qevents(&self) -> String {
        let mut s = String::from("# ts_us dir src_ip src_port dst_ip dst_port payload_hex\n");
        for d in &self.datagrams {
            let dir = if d.src.port() == 443 { "s2c" } else { "c2s" };
            let _ = writeln!(
                s,
                "{} {dir} {} {} {} {} {}",
                d.timestamp_us,
                d.src.ip(),
                d.src.port(),
                d.dst.ip(),
                d.dst.port(),
                hex::encode(&d.payload)
            );
        }
        s
    }
}

/// Two sequential exchanges at 100 ms RTT: a 600 B request answered by
/// 5500 B, then a 450 B request answered by 1500 B. Client ACKs are 40 B,
/// server ACKs 28 B.
pub fn two_pair_sequential() -> Fixture {
    let rtt = 100_000;
    let mut f = Fixture::default();
    let fin = f.handshake(0, rtt);
    let r1 = fin + 15_000;
    f.c(r1, &[Pkt::Short(600)]);
    f.s(r1 + rtt, &[Pkt::Short(28)]);
    let t = f.burst(false, r1 + rtt + 10_000, 2_000, &[1200, 1200, 1200, 1200, 700]);
    f.c(t + 500, &[Pkt::Short(40)]);
    let r2 = t + 3 * rtt;
    f.c(r2, &[Pkt::Short(450)]);
    f.s(r2 + rtt, &[Pkt::Short(28)]);
    let t = f.burst(false, r2 + rtt + 10_000, 2_000, &[1200, 300]);
    f.c(t + 500, &[Pkt::Short(40)]);
    f
}
