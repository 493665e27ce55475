//! Request estimation: groups client-to-server data packets into requests.
//!
//! ```text
//!   Initial --0-RTT request--> (emit) Initial
//!   Initial/Idle --LARGE--> Waiting --LARGE--> Transmitting --SMALL--> (emit) Idle
//!   Initial/Idle --SMALL--> (emit) Idle
//!   Waiting --SMALL--> (emit 2 packets) Idle
//!   Waiting/Transmitting --timeout--> (emit) Idle
//! ```
//!
//! LARGE means longer than the upstream MTU minus the slack; SMALL is anything
//! from the request threshold up to that bound. Callers only hand over packets
//! that already passed the request threshold and travel alone in their datagram.

use serde::Serialize;

use crate::model::{AnalyzerConfig, Direction, LongPacketType, Micros, PacketRecord};
use crate::run::{deadline_after, PacketRun, SizeClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RequestEstimate {
    pub start_us: Micros,
    /// Timestamp of the last member packet.
    pub end_us: Micros,
    pub size: u64,
    pub packet_count: u32,
    pub is_zero_rtt: bool,
    pub first_datagram: u64,
    pub last_datagram: u64,
}

impl RequestEstimate {
    fn from_run(run: PacketRun, is_zero_rtt: bool) -> Self {
        RequestEstimate {
            start_us: run.start_us,
            end_us: run.last_us,
            size: run.size,
            packet_count: run.packets,
            is_zero_rtt,
            first_datagram: run.first_datagram,
            last_datagram: run.last_datagram,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RequestState {
    Initial,
    Idle,
    Waiting,
    Transmitting,
}

#[derive(Debug, Clone, Copy)]
pub enum RequestEvent<'a> {
    Packet(&'a PacketRecord),
    Timeout,
}

#[derive(Debug, Clone)]
pub struct RequestMachine {
    state: RequestState,
    pending: Option<PacketRun>,
    /// A 0-RTT request was already accepted in the current client flight.
    zero_rtt_in_flight: bool,
    mtu_slack: u32,
    zero_rtt_len: (u32, u32),
}

impl RequestMachine {
    pub fn new(cfg: &AnalyzerConfig) -> Self {
        RequestMachine {
            state: RequestState::Initial,
            pending: None,
            zero_rtt_in_flight: false,
            mtu_slack: cfg.mtu_slack,
            zero_rtt_len: (cfg.zero_rtt_min_len, cfg.zero_rtt_max_len),
        }
    }

    pub fn state(&self) -> RequestState {
        self.state
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    pub fn last_packet_us(&self) -> Option<Micros> {
        self.pending.map(|p| p.last_us)
    }

    /// Any server packet ends the current client flight.
    pub fn on_server_packet(&mut self) {
        self.zero_rtt_in_flight = false;
    }

    /// A 0-RTT packet carries a request when it is alone in its datagram, its
    /// length is within the 0-RTT request window, and no other 0-RTT request
    /// was accepted in the same client flight.
    pub fn detect_zero_rtt_request(&self, pkt: &PacketRecord) -> bool {
        pkt.direction == Direction::ClientToServer
            && pkt.long_packet_type == Some(LongPacketType::ZeroRtt)
            && pkt.quic_packets_in_datagram == 1
            && (self.zero_rtt_len.0..=self.zero_rtt_len.1).contains(&pkt.quic_packet_len)
            && !self.zero_rtt_in_flight
    }

    /// Emits a 0-RTT request if `pkt` qualifies.
    pub fn step_zero_rtt(&mut self, pkt: &PacketRecord) -> Option<RequestEstimate> {
        if self.state != RequestState::Initial || !self.detect_zero_rtt_request(pkt) {
            return None;
        }
        self.zero_rtt_in_flight = true;
        Some(RequestEstimate::from_run(PacketRun::new(pkt), true))
    }

    pub fn deadline(&self, rtt_s: f64, delta_rtts: f64) -> Option<f64> {
        match self.state {
            RequestState::Waiting | RequestState::Transmitting => {
                self.pending.map(|p| deadline_after(p.last_us, rtt_s, delta_rtts))
            }
            _ => None,
        }
    }

    pub fn step(&mut self, event: RequestEvent<'_>, mtu_up: u32) -> Option<RequestEstimate> {
        let pkt = match event {
            RequestEvent::Timeout => {
                return match self.state {
                    RequestState::Waiting | RequestState::Transmitting => self.emit(),
                    _ => None,
                };
            }
            RequestEvent::Packet(p) => p,
        };
        let class = SizeClass::of(pkt.quic_packet_len, mtu_up, self.mtu_slack);
        match (self.state, class) {
            (RequestState::Initial | RequestState::Idle, SizeClass::Large) => {
                self.pending = Some(PacketRun::new(pkt));
                self.state = RequestState::Waiting;
                None
            }
            (RequestState::Initial | RequestState::Idle, SizeClass::Small) => {
                self.pending = Some(PacketRun::new(pkt));
                self.emit()
            }
            (RequestState::Waiting, SizeClass::Large) => {
                self.push(pkt);
                self.state = RequestState::Transmitting;
                None
            }
            (RequestState::Transmitting, SizeClass::Large) => {
                self.push(pkt);
                None
            }
            (RequestState::Waiting | RequestState::Transmitting, SizeClass::Small) => {
                self.push(pkt);
                self.emit()
            }
        }
    }

    /// Emits whatever is pending (end of trace or connection close).
    pub fn flush(&mut self) -> Option<RequestEstimate> {
        if self.pending.is_some() {
            self.emit()
        } else {
            None
        }
    }

    fn push(&mut self, pkt: &PacketRecord) {
        match &mut self.pending {
            Some(run) => run.push(pkt),
            None => self.pending = Some(PacketRun::new(pkt)),
        }
    }

    fn emit(&mut self) -> Option<RequestEstimate> {
        let run = self.pending.take()?;
        self.state = RequestState::Idle;
        Some(RequestEstimate::from_run(run, false))
    }
}
