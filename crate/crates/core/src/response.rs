//! Response estimation: groups server-to-client data packets into responses.
//!
//! States: Initial (no request yet), Idle, WaitToStart (small head packets),
//! Transmitting (MTU-sized run), WaitToEnd (small tail packets). A response is
//! emitted when the machine returns to Idle, either through a one-RTT silence
//! or when an MTU-sized packet shows up after the tail.

use serde::Serialize;

use crate::model::{AnalyzerConfig, Micros, PacketRecord};
use crate::run::{deadline_after, PacketRun, SizeClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ResponseEstimate {
    pub start_us: Micros,
    pub end_us: Micros,
    pub size: u64,
    pub packet_count: u32,
    pub first_datagram: u64,
    pub last_datagram: u64,
}

impl From<PacketRun> for ResponseEstimate {
    fn from(run: PacketRun) -> Self {
        ResponseEstimate {
            start_us: run.start_us,
            end_us: run.last_us,
            size: run.size,
            packet_count: run.packets,
            first_datagram: run.first_datagram,
            last_datagram: run.last_datagram,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ResponseState {
    Initial,
    Idle,
    WaitToStart,
    Transmitting,
    WaitToEnd,
}

#[derive(Debug, Clone, Copy)]
pub enum ResponseEvent<'a> {
    Packet(&'a PacketRecord),
    Timeout,
}

#[derive(Debug, Clone)]
pub struct ResponseMachine {
    state: ResponseState,
    pending: Option<PacketRun>,
    mtu_slack: u32,
    /// Data packets discarded because no request had been estimated yet.
    pub dropped_bytes: u64,
    pub dropped_packets: u64,
}

impl ResponseMachine {
    pub fn new(cfg: &AnalyzerConfig) -> Self {
        ResponseMachine { state: ResponseState::Initial, pending: None, mtu_slack: cfg.mtu_slack, dropped_bytes: 0, dropped_packets: 0 }
    }

    pub fn state(&self) -> ResponseState {
        self.state
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    pub fn deadline(&self, rtt_s: f64, delta_rtts: f64) -> Option<f64> {
        self.pending.map(|p| deadline_after(p.last_us, rtt_s, delta_rtts))
    }

    /// `requests_seen` is the number of request estimates produced so far.
    pub fn step(&mut self, event: ResponseEvent<'_>, mtu_down: u32, requests_seen: u64) -> Option<ResponseEstimate> {
        let pkt = match event {
            ResponseEvent::Timeout => return self.flush(),
            ResponseEvent::Packet(p) => p,
        };
        let class = SizeClass::of(pkt.quic_packet_len, mtu_down, self.mtu_slack);
        match self.state {
            ResponseState::Initial if requests_seen == 0 => {
                self.dropped_bytes += u64::from(pkt.quic_packet_len);
                self.dropped_packets += 1;
                None
            }
            ResponseState::Initial | ResponseState::Idle => {
                self.pending = Some(PacketRun::new(pkt));
                self.state = match class {
                    SizeClass::Large => ResponseState::Transmitting,
                    SizeClass::Small => ResponseState::WaitToStart,
                };
                None
            }
            ResponseState::WaitToStart => {
                self.push(pkt);
                if class == SizeClass::Large {
                    self.state = ResponseState::Transmitting;
                }
                None
            }
            ResponseState::Transmitting => {
                self.push(pkt);
                if class == SizeClass::Small {
                    self.state = ResponseState::WaitToEnd;
                }
                None
            }
            ResponseState::WaitToEnd => match class {
                SizeClass::Small => {
                    self.push(pkt);
                    None
                }
                SizeClass::Large => {
                    let done = self.pending.replace(PacketRun::new(pkt)).map(ResponseEstimate::from);
                    self.state = ResponseState::Transmitting;
                    done
                }
            },
        }
    }

    /// Emits the pending response, if any, and goes idle.
    pub fn flush(&mut self) -> Option<ResponseEstimate> {
        let run = self.pending.take()?;
        self.state = ResponseState::Idle;
        Some(run.into())
    }

    fn push(&mut self, pkt: &PacketRecord) {
        match &mut self.pending {
            Some(run) => run.push(pkt),
            None => self.pending = Some(PacketRun::new(pkt)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Direction, HeaderForm};
    use proptest::prelude::*;

    const MTU: u32 = 1252;

    fn pkt(ts: Micros, len: u32) -> PacketRecord {
        PacketRecord {
            timestamp_us: ts,
            direction: Direction::ServerToClient,
            udp_payload_len: len,
            quic_packet_len: len,
            header_form: HeaderForm::Short,
            long_packet_type: None,
            quic_packets_in_datagram: 1,
            position_index: 0,
            datagram_index: ts,
        }
    }

    fn machine() -> ResponseMachine {
        ResponseMachine::new(&AnalyzerConfig::default())
    }

    fn feed(m: &mut ResponseMachine, pkts: &[(Micros, u32)]) -> Vec<ResponseEstimate> {
        pkts.iter().filter_map(|&(t, l)| m.step(ResponseEvent::Packet(&pkt(t, l)), MTU, 1)).collect()
    }

    #[test]
    fn mtu_run_with_small_tail() {
        let mut m = machine();
        assert!(feed(&mut m, &[(0, 1252), (10, 1252), (20, 1252), (30, 600)]).is_empty());
        assert_eq!(m.state(), ResponseState::WaitToEnd);
        let e = m.step(ResponseEvent::Timeout, MTU, 1).unwrap();
        assert_eq!((e.packet_count, e.size, e.start_us, e.end_us), (4, 4356, 0, 30));
        assert_eq!(m.state(), ResponseState::Idle);
    }

    #[test]
    fn single_small_response() {
        let mut m = machine();
        feed(&mut m, &[(0, 500)]);
        assert_eq!(m.state(), ResponseState::WaitToStart);
        let e = m.step(ResponseEvent::Timeout, MTU, 1).unwrap();
        assert_eq!((e.packet_count, e.size), (1, 500));
        assert_eq!(e.start_us, e.end_us);
    }

    #[test]
    fn large_after_tail_starts_new_response() {
        let mut m = machine();
        let out = feed(&mut m, &[(0, 1252), (10, 400), (20, 1252)]);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].packet_count, out[0].size), (2, 1652));
        assert_eq!(m.state(), ResponseState::Transmitting);
        let rest = m.flush().unwrap();
        assert_eq!((rest.start_us, rest.size), (20, 1252));
    }

    #[test]
    fn small_heads_then_mtu_run() {
        let mut m = machine();
        feed(&mut m, &[(0, 1200), (5, 300), (6, 1252), (7, 1252), (8, 200), (9, 180)]);
        let e = m.flush().unwrap();
        assert_eq!(e.packet_count, 6);
    }

    #[test]
    fn dropped_before_any_request() {
        let mut m = machine();
        assert!(m.step(ResponseEvent::Packet(&pkt(0, 900)), MTU, 0).is_none());
        assert_eq!(m.state(), ResponseState::Initial);
        assert_eq!((m.dropped_bytes, m.dropped_packets), (900, 1));
        assert!(!m.has_pending());
    }

    fn run(pkts: &[(u32, bool)]) -> (Vec<ResponseEstimate>, u64, u64) {
        let mut m = machine();
        let mut out = Vec::new();
        let mut admitted = 0;
        let mut reqs = 0;
        for (i, &(len, timeout_before)) in pkts.iter().enumerate() {
            if timeout_before {
                out.extend(m.step(ResponseEvent::Timeout, MTU, reqs));
            }
            if i == 3 {
                reqs = 1;
            }
            admitted += u64::from(len);
            out.extend(m.step(ResponseEvent::Packet(&pkt(i as Micros, len)), MTU, reqs));
            let busy = matches!(m.state(), ResponseState::WaitToStart | ResponseState::Transmitting | ResponseState::WaitToEnd);
            assert_eq!(m.has_pending(), busy);
        }
        out.extend(m.flush());
        (out, admitted, m.dropped_bytes)
    }

    proptest! {
        #[test]
        fn conservation(pkts in proptest::collection::vec((prop_oneof![35u32..1252, Just(1252u32)], proptest::bool::weighted(0.2)), 0..80)) {
            let (out, admitted, dropped) = run(&pkts);
            prop_assert_eq!(out.iter().map(|e| e.size).sum::<u64>() + dropped, admitted);
            for e in &out {
                prop_assert!(e.start_us <= e.end_us);
                prop_assert_eq!(e.start_us == e.end_us, e.packet_count == 1);
            }
            prop_assert_eq!(run(&pkts).0, out);
        }
    }
}
