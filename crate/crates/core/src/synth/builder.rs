//! Packet schedule of one synthetic connection.
//!
//! Times are kept as fractional microseconds and rounded when a datagram is
//! emitted. Datagrams are pushed roughly in time order; the caller sorts them.

use std::net::SocketAddr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::packet::{long_packet, short_packet};
use super::{Pattern, Role, ScenarioConfig, SynthDatagram};
use crate::model::{LongPacketType, Micros};

const ACK_BASE_LEN: usize = 28;
const ACK_RANGE_LEN: usize = 4;
const ACK_MAX_LEN: usize = 120;
/// Ranges closed per ACK as old losses are forgotten.
const RANGE_DECAY: f64 = 0.02;
/// New ranges one ACK may report.
const MAX_NEW_RANGES: u32 = 2;
/// Total size of the client datagram carrying its handshake Finished.
const CLIENT_FINISHED_DATAGRAM: usize = 1200;

pub(super) fn build(cfg: &ScenarioConfig, start_us: Micros, client: SocketAddr, server: SocketAddr, connection: u32) -> Vec<SynthDatagram> {
    let mut b = Builder::new(cfg, start_us, client, server, connection);
    b.run();
    b.out
}

#[derive(Debug, Clone)]
struct Exchange {
    request: Vec<usize>,
    zero_rtt: bool,
    response: Vec<usize>,
}

struct Builder<'a> {
    cfg: &'a ScenarioConfig,
    rng: ChaCha8Rng,
    client: SocketAddr,
    server: SocketAddr,
    connection: u32,
    odcid: Vec<u8>,
    client_cid: Vec<u8>,
    server_cid: Vec<u8>,
    rtt: f64,
    start: f64,
    out: Vec<SynthDatagram>,
    ranges: f64,
    pending_ranges: u32,
    since_ack: u32,
    control_sent: bool,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a ScenarioConfig, start_us: Micros, client: SocketAddr, server: SocketAddr, connection: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut cid = || {
            let mut c = vec![0u8; 8];
            rng.fill(&mut c[..]);
            c
        };
        let (odcid, client_cid, server_cid) = (cid(), cid(), cid());
        Builder {
            cfg,
            rng,
            client,
            server,
            connection,
            odcid,
            client_cid,
            server_cid,
            rtt: cfg.rtt_s * 1e6,
            start: start_us as f64,
            out: Vec::new(),
            ranges: 0.0,
            pending_ranges: 0,
            since_ack: 0,
            control_sent: false,
        }
    }

    fn mtu_up(&self) -> usize {
        self.cfg.mtu_up as usize
    }

    fn mtu_down(&self) -> usize {
        self.cfg.mtu_down as usize
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }

    /// `lo..hi` RTTs.
    fn rtts(&mut self, lo: f64, hi: f64) -> f64 {
        self.uniform(lo, hi) * self.rtt
    }

    fn size(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.gen_range(lo..=hi)
    }

    fn emit(&mut self, t: f64, upstream: bool, payload: Vec<u8>, role: Role, pair: Option<u32>) {
        let (src, dst) = if upstream { (self.client, self.server) } else { (self.server, self.client) };
        self.out.push(SynthDatagram {
            timestamp_us: t.round() as Micros,
            src,
            dst,
            payload,
            role,
            pair,
            connection: self.connection,
        });
    }

    fn long(&mut self, ty: LongPacketType, upstream: bool, len: usize) -> Vec<u8> {
        let (dcid, scid) = match (upstream, ty) {
            (true, LongPacketType::Initial | LongPacketType::ZeroRtt) if !self.handshake_keys_known() => {
                (self.odcid.clone(), self.client_cid.clone())
            }
            (true, _) => (self.server_cid.clone(), self.client_cid.clone()),
            (false, _) => (self.client_cid.clone(), self.server_cid.clone()),
        };
        long_packet(&mut self.rng, ty, &dcid, &scid, len)
    }

    /// Whether the client has seen a server long header yet and switched to
    /// the server's connection ID.
    fn handshake_keys_known(&self) -> bool {
        self.out.iter().any(|d| d.src == self.server)
    }

    fn short(&mut self, upstream: bool, len: usize) -> Vec<u8> {
        let dcid = if upstream { self.server_cid.clone() } else { self.client_cid.clone() };
        short_packet(&mut self.rng, &dcid, len)
    }

    fn run(&mut self) {
        let mut groups = self.plan().into_iter();
        let mut pair = 0u32;
        let first = groups.next().expect("at least one exchange");
        let mut last = if first[0].zero_rtt {
            self.zero_rtt_opening(self.start, &first[0], pair)
        } else {
            let ready = self.handshake(self.start);
            let t = ready + self.rtts(0.005, 0.05);
            self.group(t, &first, pair)
        };
        pair += first.len() as u32;
        for g in groups {
            let t = last + self.rtts(1.3, 5.0);
            last = self.group(t, &g, pair);
            pair += g.len() as u32;
        }
        let t = last + self.rtts(1.3, 3.0);
        let len = self.size(30, 45);
        let p = self.short(true, len);
        self.emit(t, true, p, Role::Control, None);
    }

    fn plan(&mut self) -> Vec<Vec<Exchange>> {
        let n = self.cfg.n_pairs as usize;
        let mu = self.mtu_up();
        let seq = |b: &mut Self, f: &dyn Fn(&mut Self, usize) -> Exchange| -> Vec<Vec<Exchange>> {
            (0..n).map(|i| vec![f(b, i)]).collect()
        };
        match self.cfg.pattern {
            Pattern::VideoSequential => seq(self, &|b, _| {
                let req = b.size(300, 900);
                let n_large = b.size(20, 150);
                let head = b.rng.gen_bool(0.5);
                Exchange { request: vec![req], zero_rtt: false, response: b.large_response(n_large, head) }
            }),
            Pattern::WebMultiplexed if self.cfg.interleave => {
                let all: Vec<Exchange> = (0..n)
                    .map(|_| {
                        let req = self.size(150, 800);
                        let n_large = self.size(2, 8);
                        Exchange { request: vec![req], zero_rtt: false, response: self.large_response(n_large, false) }
                    })
                    .collect();
                all.chunks(3).map(<[Exchange]>::to_vec).collect()
            }
            Pattern::WebMultiplexed => seq(self, &|b, _| b.web_exchange()),
            Pattern::Login => seq(self, &|b, _| {
                let tail = b.size(150, 900);
                let request = if b.rng.gen_bool(0.5) { vec![mu, tail] } else { vec![tail] };
                let k = b.size(1, 2);
                Exchange { request, zero_rtt: false, response: b.small_response(k) }
            }),
            Pattern::BulkDownload => seq(self, &|b, _| {
                let req = b.size(150, 600);
                let n_large = b.size(100, 400);
                Exchange { request: vec![req], zero_rtt: false, response: b.large_response(n_large, false) }
            }),
            Pattern::BulkUpload => seq(self, &|b, _| {
                let k = b.size(5, 100);
                let mut request = vec![mu; k];
                request.push(b.size(150, mu - 50));
                Exchange { request, zero_rtt: false, response: b.small_response(1) }
            }),
            Pattern::ZeroRttResume => seq(self, &|b, i| {
                if i == 0 {
                    let req = b.size(200, 900);
                    let n_large = b.size(2, 30);
                    Exchange { request: vec![req], zero_rtt: true, response: b.large_response(n_large, false) }
                } else {
                    b.web_exchange()
                }
            }),
        }
    }

    fn web_exchange(&mut self) -> Exchange {
        let req = self.size(150, 800);
        let response = if self.rng.gen_bool(0.4) {
            self.small_response(1)
        } else {
            let n_large = self.size(1, 20);
            let head = self.rng.gen_bool(0.3);
            self.large_response(n_large, head)
        };
        Exchange { request: vec![req], zero_rtt: false, response }
    }

    /// Optional head just under the MTU, `n` MTU-sized packets, small tail.
    fn large_response(&mut self, n: usize, head: bool) -> Vec<usize> {
        let md = self.mtu_down();
        let mut out = Vec::with_capacity(n + 2);
        if head {
            out.push(md - self.size(20, 60));
        }
        out.extend(std::iter::repeat_n(md, n));
        out.push(self.size(150, md - 50));
        out
    }

    fn small_response(&mut self, k: usize) -> Vec<usize> {
        let md = self.mtu_down();
        (0..k).map(|_| self.size(150, md - 50)).collect()
    }

    /// Full 1-RTT handshake starting at `t0`; returns when the client sent
    /// its Finished and may start sending requests.
    fn handshake(&mut self, t0: f64) -> f64 {
        let p = self.long(LongPacketType::Initial, true, self.mtu_up());
        self.emit(t0, true, p, Role::Handshake, None);
        let mut t = t0;
        if self.rng.gen_bool(0.25) {
            // the server asks for another Initial, costing a second round trip
            t += self.rtt * (1.0 + self.uniform(0.0, 0.02));
            let len = self.size(90, 200);
            let p = self.long(LongPacketType::Initial, false, len);
            self.emit(t, false, p, Role::Handshake, None);
            t += self.rtts(0.005, 0.02);
            let p = self.long(LongPacketType::Initial, true, self.mtu_up());
            self.emit(t, true, p, Role::Handshake, None);
        }
        let last = self.server_flight(t);
        self.client_finished(last)
    }

    /// Server Initial and Handshake packets answering a client flight sent at `t`.
    fn server_flight(&mut self, t: f64) -> f64 {
        let md = self.mtu_down();
        let mut t = t + self.rtt * (1.0 + self.uniform(0.0, 0.02));
        let init = self.size(120, 180);
        let mut dg = self.long(LongPacketType::Initial, false, init);
        dg.extend(self.long(LongPacketType::Handshake, false, md - init));
        self.emit(t, false, dg, Role::Handshake, None);
        t += self.rtts(0.001, 0.01);
        let p = self.long(LongPacketType::Handshake, false, md);
        self.emit(t, false, p, Role::Handshake, None);
        if self.rng.gen_bool(0.5) {
            t += self.rtts(0.001, 0.01);
            let len = self.size(300, 800);
            let p = self.long(LongPacketType::Handshake, false, len);
            self.emit(t, false, p, Role::Handshake, None);
        }
        t
    }

    /// Client Finished (coalesced with an Initial ACK and the first short
    /// packet) and the server's HANDSHAKE_DONE one round trip later.
    fn client_finished(&mut self, server_last: f64) -> f64 {
        let tf = server_last + self.rtts(0.01, 0.05);
        let hs = self.size(60, 90);
        let short = self.size(40, 90);
        let mut dg = self.long(LongPacketType::Initial, true, CLIENT_FINISHED_DATAGRAM - hs - short);
        dg.extend(self.long(LongPacketType::Handshake, true, hs));
        dg.extend(self.short(true, short));
        self.emit(tf, true, dg, Role::Handshake, None);

        let td = tf + self.rtt * (1.0 + self.uniform(0.0, 0.02));
        let hs = self.size(40, 60);
        let short = self.size(30, 60);
        let mut dg = self.long(LongPacketType::Handshake, false, hs);
        dg.extend(self.short(false, short));
        self.emit(td, false, dg, Role::Handshake, None);
        let len = self.size(20, 34);
        let p = self.short(false, len);
        let t = td + self.rtts(0.001, 0.01);
        self.emit(t, false, p, Role::Control, None);
        tf
    }

    fn zero_rtt_opening(&mut self, t0: f64, ex: &Exchange, pair: u32) -> f64 {
        let p = self.long(LongPacketType::Initial, true, self.mtu_up());
        self.emit(t0, true, p, Role::Handshake, None);
        let treq = t0 + self.rtts(0.001, 0.01);
        self.request(treq, ex, pair);
        let last = self.server_flight(t0);
        self.client_finished(last);
        let start = last + self.rtts(0.05, 0.2);
        let seq: Vec<_> = ex.response.iter().map(|&l| (l, pair)).collect();
        self.response(start, &seq)
    }

    /// Requests of `exs` back to back from `t`, then their responses; returns
    /// the time of the last response packet.
    fn group(&mut self, t: f64, exs: &[Exchange], pair0: u32) -> f64 {
        let mut t = t;
        for (j, ex) in exs.iter().enumerate() {
            if j > 0 {
                t += self.rtts(0.01, 0.1);
            }
            t = self.request(t, ex, pair0 + j as u32);
        }
        let start = t + self.rtt * (1.0 + self.uniform(0.05, 0.5));
        // the first packet of each later response goes out before the tail of
        // the previous one
        let mut seq = Vec::new();
        for (j, ex) in exs.iter().enumerate() {
            let p = pair0 + j as u32;
            let (tail, body) = ex.response.split_last().expect("non-empty response");
            let skip = usize::from(j > 0 && exs.len() > 1);
            seq.extend(body.iter().skip(skip).map(|&l| (l, p)));
            if let Some(next) = exs.get(j + 1) {
                seq.push((next.response[0], p + 1));
            }
            seq.push((*tail, p));
        }
        self.response(start, &seq)
    }

    /// Emits the request packets from `t`; returns the time of the last one.
    fn request(&mut self, t: f64, ex: &Exchange, pair: u32) -> f64 {
        let mut t = t;
        for (i, &len) in ex.request.iter().enumerate() {
            if i > 0 {
                t += self.rtts(0.002, 0.03);
            }
            let p = if ex.zero_rtt { self.long(LongPacketType::ZeroRtt, true, len) } else { self.short(true, len) };
            self.emit(t, true, p, Role::RequestData, Some(pair));
            if !ex.zero_rtt && (i + 1) % 4 == 0 {
                self.server_ack(t);
            }
        }
        if !ex.zero_rtt {
            self.server_ack(t);
        }
        if !self.control_sent && !ex.zero_rtt {
            self.control_sent = true;
            let len = self.size(30, 45);
            let p = self.short(true, len);
            let tc = t + self.rtts(0.001, 0.01);
            self.emit(tc, true, p, Role::Control, None);
        }
        t
    }

    fn server_ack(&mut self, sent: f64) {
        let t = sent + self.rtt * (1.0 + self.uniform(0.0, 0.02));
        let p = self.short(false, ACK_BASE_LEN);
        self.emit(t, false, p, Role::Ack, None);
    }

    fn client_ack(&mut self, t: f64) {
        let new = self.pending_ranges.min(MAX_NEW_RANGES);
        self.pending_ranges -= new;
        self.ranges = (self.ranges + f64::from(new) - RANGE_DECAY).max(0.0);
        let len = (ACK_BASE_LEN + ACK_RANGE_LEN * self.ranges.floor() as usize).min(ACK_MAX_LEN);
        let p = self.short(true, len);
        self.emit(t, true, p, Role::Ack, None);
        self.since_ack = 0;
    }

    /// Emits response packets from `start`. Lost packets are not visible and
    /// come back as small retransmissions after the last packet.
    fn response(&mut self, start: f64, seq: &[(usize, u32)]) -> f64 {
        let mut t = start;
        let mut lost = Vec::new();
        let mut first = true;
        let send = |b: &mut Self, t: &mut f64, len: usize, pair: u32, first: &mut bool| {
            if !*first {
                *t += b.rtts(0.002, 0.03);
            }
            *first = false;
            let p = b.short(false, len);
            b.emit(*t, false, p, Role::ResponseData, Some(pair));
            b.since_ack += 1;
            if b.since_ack >= b.cfg.ack_every {
                let ta = *t + b.rtts(0.0005, 0.001);
                b.client_ack(ta);
            }
        };
        for &(len, pair) in seq {
            if self.cfg.loss_rate > 0.0 && self.rng.gen_bool(self.cfg.loss_rate) {
                self.pending_ranges += 1;
                lost.push(pair);
                if !first {
                    t += self.rtts(0.002, 0.03);
                }
                continue;
            }
            send(self, &mut t, len, pair, &mut first);
        }
        for pair in lost {
            let len = self.size(150, 600);
            send(self, &mut t, len, pair, &mut first);
        }
        if self.since_ack > 0 {
            let ta = t + self.rtts(0.0005, 0.001);
            self.client_ack(ta);
        }
        t
    }
}
