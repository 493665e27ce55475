//! Pairs estimated requests with estimated responses.
//!
//! The matcher collects requests until it holds at least as many responses,
//! then waits one more RTT for stragglers before emitting the group as one
//! HTTP object. Requests arriving during that wait are held back and seed the
//! next object. A group that never sees enough responses is emitted after the
//! long association timeout. Interleaved request/response exchanges therefore
//! come out as a single "super" object whose pair count is its request count.

use serde::Serialize;

use crate::model::{Micros, TimingConfig};
use crate::request::RequestEstimate;
use crate::response::ResponseEstimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MatchState {
    Initial,
    Idle,
    WaitingForResponse,
    WaitingToOutput,
}

#[derive(Debug, Clone, Copy)]
pub enum MatchEvent {
    Request(RequestEstimate),
    Response(ResponseEstimate),
    Timeout,
}

/// Requests and responses grouped into one HTTP object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchedGroup {
    pub requests: Vec<RequestEstimate>,
    pub responses: Vec<ResponseEstimate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationFlag {
    Valid,
    SuspectTiming,
    /// No response was matched to the object.
    Unanswered,
}

/// Checks that the first response started more than the minimum and less than
/// the maximum number of RTTs after the first request.
pub fn validate_association(req_start_us: Micros, resp_start_us: Micros, rtt_s: f64, timing: &TimingConfig) -> AssociationFlag {
    let gap = (resp_start_us as f64 - req_start_us as f64) / 1e6;
    if gap > timing.association_min_rtts * rtt_s && gap < timing.association_max_rtts * rtt_s {
        AssociationFlag::Valid
    } else {
        AssociationFlag::SuspectTiming
    }
}

#[derive(Debug, Clone)]
pub struct Matcher {
    state: MatchState,
    open_requests: Vec<RequestEstimate>,
    open_responses: Vec<ResponseEstimate>,
    held_requests: Vec<RequestEstimate>,
    last_event: f64,
    n_req_cap: usize,
    /// Responses thrown away because no request was open.
    pub discarded: Vec<ResponseEstimate>,
}

impl Matcher {
    pub fn new(n_req_cap: usize) -> Self {
        Matcher {
            state: MatchState::Initial,
            open_requests: Vec::new(),
            open_responses: Vec::new(),
            held_requests: Vec::new(),
            last_event: 0.0,
            n_req_cap: n_req_cap.max(1),
            discarded: Vec::new(),
        }
    }

    pub fn state(&self) -> MatchState {
        self.state
    }

    pub fn open_counts(&self) -> (usize, usize, usize) {
        (self.open_requests.len(), self.open_responses.len(), self.held_requests.len())
    }

    pub fn deadline(&self, rtt_s: f64, timing: &TimingConfig) -> Option<f64> {
        let k = match self.state {
            MatchState::WaitingForResponse => timing.association_max_rtts,
            MatchState::WaitingToOutput => timing.match_output_rtts,
            _ => return None,
        };
        Some(self.last_event + k * rtt_s * 1e6)
    }

    /// Feeds one event delivered at virtual time `now` (fractional microseconds).
    pub fn step(&mut self, event: MatchEvent, now: f64) -> Vec<MatchedGroup> {
        let mut out = Vec::new();
        match (self.state, event) {
            (MatchState::Initial | MatchState::Idle, MatchEvent::Response(r)) => self.discarded.push(r),
            (MatchState::Initial | MatchState::Idle, MatchEvent::Request(r)) => {
                self.open_requests.push(r);
                self.state = MatchState::WaitingForResponse;
                self.last_event = now;
            }
            (MatchState::Initial | MatchState::Idle, MatchEvent::Timeout) => {}

            (MatchState::WaitingForResponse, MatchEvent::Request(r)) => {
                if self.open_requests.len() >= self.n_req_cap {
                    out.extend(self.take_group());
                }
                self.open_requests.push(r);
                self.last_event = now;
            }
            (MatchState::WaitingForResponse, MatchEvent::Response(r)) => {
                self.open_responses.push(r);
                self.last_event = now;
                if self.open_responses.len() >= self.open_requests.len() {
                    self.state = MatchState::WaitingToOutput;
                }
            }
            (MatchState::WaitingForResponse, MatchEvent::Timeout) => {
                out.extend(self.take_group());
                self.state = MatchState::Idle;
            }

            (MatchState::WaitingToOutput, MatchEvent::Response(r)) => {
                self.open_responses.push(r);
                self.last_event = now;
            }
            (MatchState::WaitingToOutput, MatchEvent::Request(r)) => self.held_requests.push(r),
            (MatchState::WaitingToOutput, MatchEvent::Timeout) => {
                out.extend(self.take_group());
                self.seed_from_held(&mut out);
            }
        }
        out
    }

    /// Emits everything still open, held requests as their own object(s).
    pub fn flush(&mut self) -> Vec<MatchedGroup> {
        let mut out = Vec::new();
        out.extend(self.take_group());
        self.seed_from_held(&mut out);
        out.extend(self.take_group());
        if self.state != MatchState::Initial {
            self.state = MatchState::Idle;
        }
        out
    }

    fn seed_from_held(&mut self, out: &mut Vec<MatchedGroup>) {
        let mut held = std::mem::take(&mut self.held_requests);
        if held.is_empty() {
            self.state = MatchState::Idle;
            return;
        }
        while held.len() > self.n_req_cap {
            let rest = held.split_off(self.n_req_cap);
            out.push(MatchedGroup { requests: held, responses: Vec::new() });
            held = rest;
        }
        self.last_event = held.last().map_or(self.last_event, |r| r.end_us as f64);
        self.open_requests = held;
        self.state = MatchState::WaitingForResponse;
    }

    fn take_group(&mut self) -> Option<MatchedGroup> {
        if self.open_requests.is_empty() {
            debug_assert!(self.open_responses.is_empty());
            return None;
        }
        Some(MatchedGroup {
            requests: std::mem::take(&mut self.open_requests),
            responses: std::mem::take(&mut self.open_responses),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RTT_US: f64 = 100_000.0;

    fn req(t: Micros) -> RequestEstimate {
        RequestEstimate { start_us: t, end_us: t, size: 300, packet_count: 1, is_zero_rtt: false, first_datagram: t, last_datagram: t }
    }

    fn resp(t: Micros) -> ResponseEstimate {
        ResponseEstimate { start_us: t, end_us: t + 1000, size: 5000, packet_count: 5, first_datagram: t, last_datagram: t + 1 }
    }

    #[test]
    fn sequential_pair() {
        let mut m = Matcher::new(64);
        let timing = TimingConfig::default();
        assert!(m.step(MatchEvent::Request(req(0)), 0.0).is_empty());
        assert_eq!(m.state(), MatchState::WaitingForResponse);
        assert_eq!(m.deadline(0.1, &timing), Some(20.0 * RTT_US));
        // response estimated one RTT after its last packet
        assert!(m.step(MatchEvent::Response(resp(120_000)), 221_000.0).is_empty());
        assert_eq!(m.state(), MatchState::WaitingToOutput);
        assert_eq!(m.deadline(0.1, &timing), Some(321_000.0));
        let out = m.step(MatchEvent::Timeout, 321_000.0);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].requests.len(), out[0].responses.len()), (1, 1));
        assert_eq!(m.state(), MatchState::Idle);
    }

    #[test]
    fn interleaved_pairs_make_one_super_object() {
        let mut m = Matcher::new(64);
        for t in [0, 10_000, 20_000] {
            m.step(MatchEvent::Request(req(t)), t as f64);
        }
        m.step(MatchEvent::Response(resp(110_000)), 150_000.0);
        m.step(MatchEvent::Response(resp(130_000)), 170_000.0);
        assert_eq!(m.state(), MatchState::WaitingForResponse);
        m.step(MatchEvent::Response(resp(150_000)), 260_000.0);
        assert_eq!(m.state(), MatchState::WaitingToOutput);
        let out = m.step(MatchEvent::Timeout, 360_000.0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].requests.len(), 3);
        assert_eq!(out[0].responses.len(), 3);
    }

    #[test]
    fn unanswered_request_times_out() {
        let mut m = Matcher::new(64);
        m.step(MatchEvent::Request(req(0)), 0.0);
        let out = m.step(MatchEvent::Timeout, 2_000_001.0);
        assert_eq!(out.len(), 1);
        assert!(out[0].responses.is_empty());
        assert_eq!(m.state(), MatchState::Idle);
    }

    #[test]
    fn held_requests_seed_next_object() {
        let mut m = Matcher::new(64);
        m.step(MatchEvent::Request(req(0)), 0.0);
        m.step(MatchEvent::Response(resp(110_000)), 220_000.0);
        m.step(MatchEvent::Request(req(250_000)), 250_000.0);
        assert_eq!(m.open_counts(), (1, 1, 1));
        let out = m.step(MatchEvent::Timeout, 320_000.0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].requests[0].start_us, 0);
        assert_eq!(m.state(), MatchState::WaitingForResponse);
        assert_eq!(m.open_counts(), (1, 0, 0));
    }

    #[test]
    fn responses_discarded_when_idle() {
        let mut m = Matcher::new(64);
        m.step(MatchEvent::Response(resp(5)), 5.0);
        assert_eq!(m.state(), MatchState::Initial);
        assert_eq!(m.discarded.len(), 1);
    }

    #[test]
    fn request_cap_forces_output() {
        let mut m = Matcher::new(2);
        m.step(MatchEvent::Request(req(0)), 0.0);
        m.step(MatchEvent::Request(req(1)), 1.0);
        let out = m.step(MatchEvent::Request(req(2)), 2.0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].requests.len(), 2);
        assert_eq!(m.open_counts(), (1, 0, 0));
    }

    #[test]
    fn held_requests_respect_cap() {
        let mut m = Matcher::new(2);
        m.step(MatchEvent::Request(req(0)), 0.0);
        m.step(MatchEvent::Response(resp(1)), 1.0);
        for t in 2..7 {
            m.step(MatchEvent::Request(req(t)), t as f64);
        }
        let out = m.step(MatchEvent::Timeout, 10.0);
        let sizes: Vec<_> = out.iter().map(|g| g.requests.len()).collect();
        assert_eq!(sizes, [1, 2, 2]);
        assert_eq!(m.open_counts(), (1, 0, 0));
        let rest = m.flush();
        assert_eq!(rest.len(), 1);
    }

    #[test]
    fn association_window() {
        let t = TimingConfig::default();
        assert_eq!(validate_association(0, 150_000, 0.1, &t), AssociationFlag::Valid);
        assert_eq!(validate_association(0, 40_000, 0.1, &t), AssociationFlag::SuspectTiming);
        assert_eq!(validate_association(0, 2_500_000, 0.1, &t), AssociationFlag::SuspectTiming);
        assert_eq!(validate_association(0, 100_000, 0.1, &t), AssociationFlag::SuspectTiming);
    }
}
