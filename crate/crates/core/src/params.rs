//! Per-connection adaptive parameters: data-length thresholds driven by recent
//! non-data packet lengths, per-direction MTU and the handshake RTT.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::model::{micros_to_secs, AnalyzerConfig, Direction, HeaderForm, Micros, PacketRecord};

/// The last few non-data packet lengths seen in one direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AckLengthWindow {
    pub direction: Direction,
    lengths: VecDeque<u32>,
    capacity: usize,
}

impl AckLengthWindow {
    pub fn new(direction: Direction, capacity: usize) -> Self {
        AckLengthWindow { direction, lengths: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, len: u32) {
        if self.lengths.len() == self.capacity {
            self.lengths.pop_front();
        }
        self.lengths.push_back(len);
    }

    pub fn current_max(&self) -> Option<u32> {
        self.lengths.iter().copied().max()
    }

    /// True once the window has been filled at least once.
    pub fn is_warm(&self) -> bool {
        self.lengths.len() >= self.capacity
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn lengths(&self) -> Vec<u32> {
        self.lengths.iter().copied().collect()
    }
}

/// Request and response length thresholds.
///
/// Before any request packet the request threshold is pinned at
/// `l_req_first`; afterwards each threshold is the largest length in its
/// direction's window plus a margin, never below its floor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptiveThresholds {
    pub l_req: u32,
    pub l_resp: u32,
    pub first_request_seen: bool,
    up: AckLengthWindow,
    down: AckLengthWindow,
    l_req_first: u32,
    l_req_floor: u32,
    l_resp_floor: u32,
    margin: u32,
}

impl AdaptiveThresholds {
    pub fn new(cfg: &AnalyzerConfig) -> Self {
        AdaptiveThresholds {
            l_req: cfg.l_req_first,
            l_resp: cfg.l_resp,
            first_request_seen: false,
            up: AckLengthWindow::new(Direction::ClientToServer, cfg.ack_window),
            down: AckLengthWindow::new(Direction::ServerToClient, cfg.ack_window),
            l_req_first: cfg.l_req_first,
            l_req_floor: cfg.l_req,
            l_resp_floor: cfg.l_resp,
            margin: cfg.ack_margin,
        }
    }

    pub fn threshold(&self, dir: Direction) -> u32 {
        match dir {
            Direction::ClientToServer => self.l_req,
            Direction::ServerToClient => self.l_resp,
        }
    }

    pub fn window(&self, dir: Direction) -> &AckLengthWindow {
        match dir {
            Direction::ClientToServer => &self.up,
            Direction::ServerToClient => &self.down,
        }
    }

    /// Feeds the length of a packet classified as non-data.
    pub fn record_nondata(&mut self, dir: Direction, len: u32) {
        match dir {
            Direction::ClientToServer => self.up.push(len),
            Direction::ServerToClient => self.down.push(len),
        }
        self.recompute();
    }

    pub fn mark_request_seen(&mut self) {
        if !self.first_request_seen {
            self.first_request_seen = true;
            self.recompute();
        }
    }

    fn adapted(&self, window: &AckLengthWindow, floor: u32) -> u32 {
        match window.current_max() {
            Some(max) if window.is_warm() => floor.max(max + self.margin),
            _ => floor,
        }
    }

    fn recompute(&mut self) {
        self.l_req = if self.first_request_seen {
            self.adapted(&self.up, self.l_req_floor)
        } else {
            self.l_req_first
        };
        self.l_resp = self.adapted(&self.down, self.l_resp_floor);
    }
}

/// Largest QUIC packet length seen per direction, starting from the QUIC minimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MtuEstimate {
    pub l_mtu_up: u32,
    pub l_mtu_down: u32,
}

impl MtuEstimate {
    pub fn new(init: u32) -> Self {
        MtuEstimate { l_mtu_up: init, l_mtu_down: init }
    }

    pub fn update(&mut self, pkt: &PacketRecord) {
        let slot = match pkt.direction {
            Direction::ClientToServer => &mut self.l_mtu_up,
            Direction::ServerToClient => &mut self.l_mtu_down,
        };
        *slot = (*slot).max(pkt.quic_packet_len);
    }

    pub fn get(&self, dir: Direction) -> u32 {
        match dir {
            Direction::ClientToServer => self.l_mtu_up,
            Direction::ServerToClient => self.l_mtu_down,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RttSource {
    HandshakeMeasured,
    ConfigDefault,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RttEstimate {
    pub rtt_s: f64,
    pub source: RttSource,
    pub samples: Vec<f64>,
}

/// Measures handshake round trips: each client long-header flight start is
/// paired with the first server long-header packet that follows it.
#[derive(Debug, Clone)]
pub struct RttEstimator {
    default_s: f64,
    flight_start: Option<Micros>,
    samples: Vec<f64>,
    frozen: bool,
}

impl RttEstimator {
    pub fn new(default_s: f64) -> Self {
        RttEstimator { default_s, flight_start: None, samples: Vec::new(), frozen: false }
    }

    pub fn observe(&mut self, pkt: &PacketRecord) {
        if self.frozen || pkt.header_form != HeaderForm::Long {
            return;
        }
        match pkt.direction {
            Direction::ClientToServer => {
                if self.flight_start.is_none() {
                    self.flight_start = Some(pkt.timestamp_us);
                }
            }
            Direction::ServerToClient => {
                if let Some(start) = self.flight_start.take() {
                    self.samples.push(micros_to_secs(pkt.timestamp_us - start));
                }
            }
        }
    }

    /// Stops sampling; the handshake is over.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.flight_start = None;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mean of the samples; `None` when nothing usable was measured.
    fn measured(&self) -> Option<f64> {
        if self.samples.is_empty() {
            return None;
        }
        let mean = self.samples.iter().sum::<f64>() / self.samples.len() as f64;
        (mean > 0.0).then_some(mean)
    }

    pub fn rtt_s(&self) -> f64 {
        self.measured().unwrap_or(self.default_s)
    }

    pub fn estimate(&self) -> RttEstimate {
        let (rtt_s, source) = match self.measured() {
            Some(m) => (m, RttSource::HandshakeMeasured),
            None => (self.default_s, RttSource::ConfigDefault),
        };
        RttEstimate { rtt_s, source, samples: self.samples.clone() }
    }
}

/// Estimates the RTT from the long-header phase of a connection.
pub fn estimate_rtt<'a, I>(handshake_packets: I, default_s: f64) -> RttEstimate
where
    I: IntoIterator<Item = &'a PacketRecord>,
{
    let mut est = RttEstimator::new(default_s);
    for p in handshake_packets {
        if p.header_form == HeaderForm::Short {
            break;
        }
        est.observe(p);
    }
    est.estimate()
}
