//! Per-connection pipeline: adaptive parameters, the request and response
//! machines, the matcher, and idle closure.
//!
//! Timeouts are lazy. A connection exposes its earliest pending deadline and
//! the driver fires deadlines that lie strictly before the next packet's
//! timestamp, so the same sequence of steps happens whether packets arrive
//! live or from a finished capture.

use serde::{Deserialize, Serialize};

use crate::matcher::{validate_association, AssociationFlag, MatchEvent, MatchedGroup, Matcher};
use crate::model::{micros_to_secs, AnalyzerConfig, Direction, LongPacketType, Micros, PacketRecord};
use crate::params::{AdaptiveThresholds, MtuEstimate, RttEstimator, RttSource};
use crate::request::{RequestEstimate, RequestEvent, RequestMachine};
use crate::response::{ResponseEstimate, ResponseEvent, ResponseMachine};

/// One estimated HTTP object, possibly grouping several interleaved pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct HttpObjectRecord {
    pub connection_start_us: Micros,
    pub request_start_us: Micros,
    pub request_end_us: Micros,
    pub request_size: u64,
    pub request_packets: u32,
    pub response_start_us: Option<Micros>,
    pub response_end_us: Option<Micros>,
    pub response_size: u64,
    pub response_packets: u32,
    pub pair_count: u32,
    pub is_super: bool,
    pub zero_rtt: bool,
    pub association: AssociationFlag,
    pub rtt_s: f64,
    pub ack_len_window_up: Vec<u32>,
    pub ack_len_window_down: Vec<u32>,
    pub request_datagrams: (u64, u64),
    pub response_datagrams: Option<(u64, u64)>,
}

impl HttpObjectRecord {
    fn from_group(group: MatchedGroup, conn: &Connection) -> Self {
        let reqs = &group.requests;
        let resps = &group.responses;
        let first_req = reqs.first().expect("matched group without a request");
        let request_start_us = first_req.start_us;
        let response_start_us = resps.iter().map(|r| r.start_us).min();
        let rtt_s = conn.rtt.rtt_s();
        let association = match response_start_us {
            Some(rs) => validate_association(request_start_us, rs, rtt_s, &conn.cfg.timing),
            None => AssociationFlag::Unanswered,
        };
        let pair_count = reqs.len() as u32;
        HttpObjectRecord {
            connection_start_us: conn.connection_start_us(),
            request_start_us,
            request_end_us: reqs.iter().map(|r| r.end_us).max().unwrap_or(request_start_us),
            request_size: reqs.iter().map(|r| r.size).sum(),
            request_packets: reqs.iter().map(|r| r.packet_count).sum(),
            response_start_us,
            response_end_us: resps.iter().map(|r| r.end_us).max(),
            response_size: resps.iter().map(|r| r.size).sum(),
            response_packets: resps.iter().map(|r| r.packet_count).sum(),
            pair_count,
            is_super: pair_count > 1,
            zero_rtt: reqs.iter().any(|r| r.is_zero_rtt),
            association,
            rtt_s,
            ack_len_window_up: conn.thresholds.window(Direction::ClientToServer).lengths(),
            ack_len_window_down: conn.thresholds.window(Direction::ServerToClient).lengths(),
            request_datagrams: (
                reqs.iter().map(|r| r.first_datagram).min().unwrap_or(0),
                reqs.iter().map(|r| r.last_datagram).max().unwrap_or(0),
            ),
            response_datagrams: resps.first().map(|_| {
                (
                    resps.iter().map(|r| r.first_datagram).min().unwrap_or(0),
                    resps.iter().map(|r| r.last_datagram).max().unwrap_or(0),
                )
            }),
        }
    }
}

/// Connection-level totals, emitted when the connection goes idle or the
/// input ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionSummary {
    pub connection_start_us: Micros,
    pub last_packet_us: Micros,
    pub duration_s: f64,
    pub total_request_size: u64,
    pub total_response_size: u64,
    pub total_request_packets: u64,
    pub total_response_packets: u64,
    pub individual_pair_count: u64,
    pub estimated_object_count: u64,
    pub multiplexing_level: f64,
    pub no_objects: bool,
    pub zero_rtt_requests: u64,
    /// Response-direction data that never reached an object: sent before any
    /// request, or while the matcher had no open request.
    pub unmatched_response_size: u64,
    pub unmatched_response_packets: u64,
    pub rtt_used_s: f64,
    pub rtt_source: RttSource,
    pub rtt_samples: usize,
    pub mtu_up: u32,
    pub mtu_down: u32,
    pub handshake_complete: bool,
    pub client_inferred: bool,
    pub packet_count: u64,
    pub datagram_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Object(HttpObjectRecord),
    Summary(ConnectionSummary),
}

/// What triggered an emission. Packet-triggered emissions sort before
/// deadline-triggered ones at the same instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Trigger {
    Packet = 0,
    Deadline = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    /// Virtual time of the emission in fractional microseconds.
    pub time: f64,
    pub trigger: Trigger,
    pub record: Record,
}

/// How a packet was classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketClass {
    /// Long header packet other than a 0-RTT request.
    Handshake,
    ZeroRttRequest,
    /// Short header packet below the length threshold of its direction.
    NonData,
    /// Short header packet above the threshold but sharing its datagram.
    Coalesced,
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ClassifiedPacket {
    pub datagram_index: u64,
    pub direction: Direction,
    pub quic_packet_len: u32,
    pub class: PacketClass,
    /// Whether the non-data window of this direction was full when the packet
    /// was classified.
    pub window_warm: bool,
    pub threshold: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Timer {
    Request,
    Response,
    Matcher,
    Idle,
}

#[derive(Debug, Clone)]
pub struct Connection {
    cfg: AnalyzerConfig,
    client_inferred: bool,
    thresholds: AdaptiveThresholds,
    mtu: MtuEstimate,
    rtt: RttEstimator,
    request: RequestMachine,
    response: ResponseMachine,
    matcher: Matcher,
    handshake_complete: bool,
    request_packets_seen: u64,
    first_packet_us: Option<Micros>,
    first_c2s_us: Option<Micros>,
    last_packet_us: Micros,
    last_datagram: Option<u64>,
    packet_count: u64,
    datagram_count: u64,
    zero_rtt_requests: u64,
    totals: Totals,
    closed: bool,
    log: Option<Vec<ClassifiedPacket>>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Totals {
    request_size: u64,
    response_size: u64,
    request_packets: u64,
    response_packets: u64,
    pairs: u64,
    objects: u64,
}

impl Connection {
    pub fn new(cfg: &AnalyzerConfig, client_inferred: bool) -> Self {
        Connection {
            cfg: *cfg,
            client_inferred,
            thresholds: AdaptiveThresholds::new(cfg),
            mtu: MtuEstimate::new(cfg.mtu_init),
            rtt: RttEstimator::new(cfg.rtt_default_s),
            request: RequestMachine::new(cfg),
            response: ResponseMachine::new(cfg),
            matcher: Matcher::new(cfg.n_req_cap),
            handshake_complete: false,
            request_packets_seen: 0,
            first_packet_us: None,
            first_c2s_us: None,
            last_packet_us: 0,
            last_datagram: None,
            packet_count: 0,
            datagram_count: 0,
            zero_rtt_requests: 0,
            totals: Totals::default(),
            closed: false,
            log: None,
        }
    }

    /// Keeps a per-packet classification log, retrievable with `take_log`.
    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn take_log(&mut self) -> Vec<ClassifiedPacket> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn mtu(&self) -> MtuEstimate {
        self.mtu
    }

    pub fn rtt_s(&self) -> f64 {
        self.rtt.rtt_s()
    }

    pub fn handshake_complete(&self) -> bool {
        self.handshake_complete
    }

    fn connection_start_us(&self) -> Micros {
        self.first_c2s_us.or(self.first_packet_us).unwrap_or(0)
    }

    /// Feeds one packet. The caller must first fire every deadline that lies
    /// strictly before `pkt.timestamp_us` (see [`Connection::advance_to`]).
    pub fn process(&mut self, pkt: &PacketRecord) -> Vec<Emission> {
        debug_assert!(!self.closed, "packet fed to a closed connection");
        let now = pkt.timestamp_us as f64;
        let mut out = Vec::new();

        self.first_packet_us.get_or_insert(pkt.timestamp_us);
        if pkt.direction == Direction::ClientToServer {
            self.first_c2s_us.get_or_insert(pkt.timestamp_us);
        }
        self.last_packet_us = pkt.timestamp_us;
        self.packet_count += 1;
        if self.last_datagram != Some(pkt.datagram_index) {
            self.last_datagram = Some(pkt.datagram_index);
            self.datagram_count += 1;
        }

        self.mtu.update(pkt);
        if !self.rtt.is_frozen() {
            if pkt.is_long() {
                self.rtt.observe(pkt);
            } else {
                self.rtt.freeze();
                self.handshake_complete = true;
            }
        }
        if pkt.direction == Direction::ServerToClient {
            self.request.on_server_packet();
        }

        let dir = pkt.direction;
        let threshold = self.thresholds.threshold(dir);
        let window_warm = self.thresholds.window(dir).is_warm();
        let class = if pkt.is_long() {
            if pkt.long_packet_type == Some(LongPacketType::ZeroRtt) && dir == Direction::ClientToServer {
                match self.request.step_zero_rtt(pkt) {
                    Some(req) => {
                        self.request_packets_seen += 1;
                        self.zero_rtt_requests += 1;
                        self.thresholds.mark_request_seen();
                        self.on_request(req, now, Trigger::Packet, &mut out);
                        PacketClass::ZeroRttRequest
                    }
                    None => PacketClass::Handshake,
                }
            } else {
                PacketClass::Handshake
            }
        } else if pkt.quic_packet_len < threshold {
            self.thresholds.record_nondata(dir, pkt.quic_packet_len);
            PacketClass::NonData
        } else if pkt.quic_packets_in_datagram > 1 {
            PacketClass::Coalesced
        } else {
            match dir {
                Direction::ClientToServer => {
                    self.request_packets_seen += 1;
                    self.thresholds.mark_request_seen();
                    if let Some(req) = self.request.step(RequestEvent::Packet(pkt), self.mtu.l_mtu_up) {
                        self.on_request(req, now, Trigger::Packet, &mut out);
                    }
                }
                Direction::ServerToClient => {
                    let resp = self.response.step(ResponseEvent::Packet(pkt), self.mtu.l_mtu_down, self.request_packets_seen);
                    if let Some(resp) = resp {
                        self.on_response(resp, now, Trigger::Packet, &mut out);
                    }
                }
            }
            PacketClass::Data
        };
        if let Some(log) = &mut self.log {
            log.push(ClassifiedPacket {
                datagram_index: pkt.datagram_index,
                direction: dir,
                quic_packet_len: pkt.quic_packet_len,
                class,
                window_warm,
                threshold,
            });
        }
        out
    }

    fn pending_timer(&self) -> Option<(f64, Timer)> {
        if self.closed {
            return None;
        }
        let rtt = self.rtt.rtt_s();
        let t = &self.cfg.timing;
        let idle = crate::run::deadline_after(self.last_packet_us, rtt, t.idle_rtts);
        let candidates = [
            (self.request.deadline(rtt, t.delta_t_req), Timer::Request),
            (self.response.deadline(rtt, t.delta_t_resp), Timer::Response),
            (self.matcher.deadline(rtt, t), Timer::Matcher),
            (self.first_packet_us.map(|_| idle), Timer::Idle),
        ];
        let mut best: Option<(f64, Timer)> = None;
        for (deadline, timer) in candidates {
            if let Some(d) = deadline {
                if best.is_none_or(|(b, _)| d < b) {
                    best = Some((d, timer));
                }
            }
        }
        best
    }

    /// Earliest pending deadline in fractional microseconds.
    pub fn next_deadline(&self) -> Option<f64> {
        self.pending_timer().map(|(d, _)| d)
    }

    /// Fires the earliest pending deadline.
    pub fn fire_next_deadline(&mut self) -> Vec<Emission> {
        let mut out = Vec::new();
        let Some((now, timer)) = self.pending_timer() else {
            return out;
        };
        match timer {
            Timer::Request => {
                if let Some(req) = self.request.step(RequestEvent::Timeout, self.mtu.l_mtu_up) {
                    self.on_request(req, now, Trigger::Deadline, &mut out);
                }
            }
            Timer::Response => {
                if let Some(resp) = self.response.step(ResponseEvent::Timeout, self.mtu.l_mtu_down, self.request_packets_seen) {
                    self.on_response(resp, now, Trigger::Deadline, &mut out);
                }
            }
            Timer::Matcher => {
                let groups = self.matcher.step(MatchEvent::Timeout, now);
                self.emit_groups(groups, now, Trigger::Deadline, &mut out);
            }
            Timer::Idle => self.close(now, &mut out),
        }
        out
    }

    /// Fires every deadline strictly before `now`.
    pub fn advance_to(&mut self, now: f64) -> Vec<Emission> {
        let mut out = Vec::new();
        while let Some(d) = self.next_deadline() {
            if d >= now {
                break;
            }
            out.extend(self.fire_next_deadline());
        }
        out
    }

    /// Idle check: fires pending deadlines before `now` and returns the
    /// summary if the connection has been quiet long enough to close.
    pub fn check_idle(&mut self, now: f64) -> Option<ConnectionSummary> {
        self.advance_to(now).into_iter().find_map(|e| match e.record {
            Record::Summary(s) => Some(s),
            Record::Object(_) => None,
        })
    }

    /// Runs every remaining deadline in order until the connection closes.
    pub fn finish(&mut self) -> Vec<Emission> {
        let mut out = Vec::new();
        while !self.closed {
            if self.first_packet_us.is_none() {
                self.closed = true;
                break;
            }
            out.extend(self.fire_next_deadline());
        }
        out
    }

    fn close(&mut self, now: f64, out: &mut Vec<Emission>) {
        if let Some(req) = self.request.flush() {
            self.on_request(req, now, Trigger::Deadline, out);
        }
        if let Some(resp) = self.response.flush() {
            self.on_response(resp, now, Trigger::Deadline, out);
        }
        let groups = self.matcher.flush();
        self.emit_groups(groups, now, Trigger::Deadline, out);
        let summary = self.summary();
        self.closed = true;
        out.push(Emission { time: now, trigger: Trigger::Deadline, record: Record::Summary(summary) });
    }

    fn on_request(&mut self, req: RequestEstimate, now: f64, trigger: Trigger, out: &mut Vec<Emission>) {
        let groups = self.matcher.step(MatchEvent::Request(req), now);
        self.emit_groups(groups, now, trigger, out);
    }

    fn on_response(&mut self, resp: ResponseEstimate, now: f64, trigger: Trigger, out: &mut Vec<Emission>) {
        let groups = self.matcher.step(MatchEvent::Response(resp), now);
        self.emit_groups(groups, now, trigger, out);
    }

    fn emit_groups(&mut self, groups: Vec<MatchedGroup>, now: f64, trigger: Trigger, out: &mut Vec<Emission>) {
        for g in groups {
            let obj = HttpObjectRecord::from_group(g, self);
            self.totals.request_size += obj.request_size;
            self.totals.response_size += obj.response_size;
            self.totals.request_packets += u64::from(obj.request_packets);
            self.totals.response_packets += u64::from(obj.response_packets);
            self.totals.pairs += u64::from(obj.pair_count);
            self.totals.objects += 1;
            out.push(Emission { time: now, trigger, record: Record::Object(obj) });
        }
    }

    pub fn summary(&self) -> ConnectionSummary {
        let t = self.totals;
        let rtt = self.rtt.estimate();
        let start = self.connection_start_us();
        let first = self.first_packet_us.unwrap_or(0);
        let discarded: (u64, u64) = self
            .matcher
            .discarded
            .iter()
            .fold((0, 0), |(b, p), r| (b + r.size, p + u64::from(r.packet_count)));
        ConnectionSummary {
            connection_start_us: start,
            last_packet_us: self.last_packet_us,
            duration_s: micros_to_secs(self.last_packet_us.saturating_sub(first)),
            total_request_size: t.request_size,
            total_response_size: t.response_size,
            total_request_packets: t.request_packets,
            total_response_packets: t.response_packets,
            individual_pair_count: t.pairs,
            estimated_object_count: t.objects,
            multiplexing_level: if t.objects > 0 { t.pairs as f64 / t.objects as f64 } else { 1.0 },
            no_objects: t.objects == 0,
            zero_rtt_requests: self.zero_rtt_requests,
            unmatched_response_size: self.response.dropped_bytes + discarded.0,
            unmatched_response_packets: self.response.dropped_packets + discarded.1,
            rtt_used_s: rtt.rtt_s,
            rtt_source: rtt.source,
            rtt_samples: rtt.samples.len(),
            mtu_up: self.mtu.l_mtu_up,
            mtu_down: self.mtu.l_mtu_down,
            handshake_complete: self.handshake_complete,
            client_inferred: self.client_inferred,
            packet_count: self.packet_count,
            datagram_count: self.datagram_count,
        }
    }
}

/// Runs one connection's complete packet list through the pipeline.
pub fn run_offline<'a, I>(cfg: &AnalyzerConfig, client_inferred: bool, packets: I) -> (Vec<HttpObjectRecord>, Option<ConnectionSummary>)
where
    I: IntoIterator<Item = &'a PacketRecord>,
{
    let mut objects = Vec::new();
    let mut summary = None;
    let mut conn = Connection::new(cfg, client_inferred);
    let mut collect = |emissions: Vec<Emission>| {
        for e in emissions {
            match e.record {
                Record::Object(o) => objects.push(o),
                Record::Summary(s) => summary = Some(s),
            }
        }
    };
    for pkt in packets {
        collect(conn.advance_to(pkt.timestamp_us as f64));
        if conn.is_closed() {
            conn = Connection::new(cfg, client_inferred);
        }
        collect(conn.process(pkt));
    }
    collect(conn.finish());
    (objects, summary)
}
