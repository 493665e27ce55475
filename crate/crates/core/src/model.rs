//! Shared vocabulary: directions, connection keys, per-packet records and the
//! analyzer configuration.

use std::fmt;
use std::net::{IpAddr, SocketAddr};

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Microseconds since the capture epoch.
pub type Micros = u64;

pub const MICROS_PER_SEC: f64 = 1_000_000.0;

pub fn micros_to_secs(us: Micros) -> f64 {
    us as f64 / MICROS_PER_SEC
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

impl Direction {
    pub fn reverse(self) -> Self {
        match self {
            Direction::ClientToServer => Direction::ServerToClient,
            Direction::ServerToClient => Direction::ClientToServer,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::ClientToServer => "c2s",
            Direction::ServerToClient => "s2c",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeaderForm {
    Long,
    Short,
}

/// Long header packet types (RFC 9000 17.2), read from bits 0x30 of the first byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LongPacketType {
    Initial,
    ZeroRtt,
    Handshake,
    Retry,
}

impl LongPacketType {
    pub fn from_first_byte(b: u8) -> Self {
        match (b >> 4) & 0x03 {
            0x00 => LongPacketType::Initial,
            0x01 => LongPacketType::ZeroRtt,
            0x02 => LongPacketType::Handshake,
            _ => LongPacketType::Retry,
        }
    }

    pub fn type_bits(self) -> u8 {
        match self {
            LongPacketType::Initial => 0x00,
            LongPacketType::ZeroRtt => 0x01,
            LongPacketType::Handshake => 0x02,
            LongPacketType::Retry => 0x03,
        }
    }
}

/// Identifies one QUIC connection. The client endpoint is always stored first.
///
/// `cid` is the destination connection ID from the client's first long header
/// packet; it is empty for flows picked up mid-connection.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConnectionKey {
    pub client: SocketAddr,
    pub server: SocketAddr,
    pub cid: Vec<u8>,
}

impl ConnectionKey {
    /// Builds a key from the endpoints of the first packet of a flow.
    /// `src_is_client` is true when the sender of that packet is the initiator.
    pub fn normalize(src: SocketAddr, dst: SocketAddr, src_is_client: bool, cid: Vec<u8>) -> Self {
        if src_is_client {
            ConnectionKey { client: src, server: dst, cid }
        } else {
            ConnectionKey { client: dst, server: src, cid }
        }
    }

    pub fn direction_of(&self, src: SocketAddr) -> Direction {
        if src == self.client {
            Direction::ClientToServer
        } else {
            Direction::ServerToClient
        }
    }

    pub fn client_ip(&self) -> IpAddr {
        self.client.ip()
    }
}

impl fmt::Display for ConnectionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {} udp", self.client, self.server)?;
        if !self.cid.is_empty() {
            write!(f, " cid={}", hex::encode(&self.cid))?;
        }
        Ok(())
    }
}

/// One observed QUIC packet. A datagram carrying coalesced packets yields one
/// record per QUIC packet, all sharing `timestamp_us` and `datagram_index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketRecord {
    pub timestamp_us: Micros,
    pub direction: Direction,
    pub udp_payload_len: u32,
    pub quic_packet_len: u32,
    pub header_form: HeaderForm,
    pub long_packet_type: Option<LongPacketType>,
    pub quic_packets_in_datagram: u32,
    /// Zero-based ordinal of this record within its connection.
    pub position_index: u64,
    /// Ordinal of the carrying frame within the capture.
    pub datagram_index: u64,
}

impl PacketRecord {
    pub fn is_long(&self) -> bool {
        self.header_form == HeaderForm::Long
    }

    pub fn is_zero_rtt(&self) -> bool {
        self.long_packet_type == Some(LongPacketType::ZeroRtt)
    }
}

/// Timing thresholds, all expressed as multiples of the connection RTT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub delta_t_req: f64,
    pub delta_t_resp: f64,
    /// How long the matcher waits for further responses once it holds at
    /// least as many responses as requests.
    pub match_output_rtts: f64,
    pub association_min_rtts: f64,
    pub association_max_rtts: f64,
    pub idle_rtts: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            delta_t_req: 1.0,
            delta_t_resp: 1.0,
            match_output_rtts: 1.0,
            association_min_rtts: 1.0,
            association_max_rtts: 20.0,
            idle_rtts: 20.0,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("delta_t_req", self.delta_t_req),
            ("delta_t_resp", self.delta_t_resp),
            ("match_output_rtts", self.match_output_rtts),
            ("idle_rtts", self.idle_rtts),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::new(format!("{name} must be a positive number, got {v}")));
            }
        }
        if !(self.association_min_rtts > 0.0
            && self.association_min_rtts < self.association_max_rtts
            && self.association_max_rtts.is_finite())
        {
            return Err(ConfigError::new(format!(
                "association window must satisfy 0 < min < max, got ({}, {})",
                self.association_min_rtts, self.association_max_rtts
            )));
        }
        Ok(())
    }
}

/// Every tunable of the analyzer. Defaults are the working values of the
/// estimation algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerConfig {
    pub timing: TimingConfig,
    /// Request threshold in force until the first request packet is seen.
    pub l_req_first: u32,
    /// Request threshold floor once a request has been seen.
    pub l_req: u32,
    /// Response threshold floor (also its initial value).
    pub l_resp: u32,
    pub mtu_init: u32,
    /// RTT used when the handshake offers no round trip to measure.
    pub rtt_default_s: f64,
    pub n_req_cap: usize,
    /// Slack below the MTU that still counts as an MTU-sized packet.
    pub mtu_slack: u32,
    pub ack_window: usize,
    /// Margin added to the largest recent non-data length to get a threshold.
    pub ack_margin: u32,
    pub zero_rtt_min_len: u32,
    pub zero_rtt_max_len: u32,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        AnalyzerConfig {
            timing: TimingConfig::default(),
            l_req_first: 100,
            l_req: 50,
            l_resp: 35,
            mtu_init: 1200,
            rtt_default_s: 0.1,
            n_req_cap: 64,
            mtu_slack: 8,
            ack_window: 10,
            ack_margin: 10,
            zero_rtt_min_len: 100,
            zero_rtt_max_len: 1000,
        }
    }
}

impl AnalyzerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.timing.validate()?;
        if !(self.rtt_default_s.is_finite() && self.rtt_default_s > 0.0) {
            return Err(ConfigError::new("rtt_default must be positive"));
        }
        if self.n_req_cap == 0 {
            return Err(ConfigError::new("n_req_cap must be at least 1"));
        }
        if self.ack_window == 0 {
            return Err(ConfigError::new("ack_window must be at least 1"));
        }
        if self.l_req == 0 || self.l_resp == 0 || self.l_req_first == 0 {
            return Err(ConfigError::new("length thresholds must be positive"));
        }
        if self.mtu_init <= self.mtu_slack {
            return Err(ConfigError::new("mtu_init must exceed the MTU slack"));
        }
        if self.zero_rtt_min_len > self.zero_rtt_max_len {
            return Err(ConfigError::new("0-RTT length window is empty"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(s: &str) -> SocketAddr {
        s.parse().unwrap()
    }

    #[test]
    fn normalize_puts_initiator_first() {
        let a = addr("10.0.0.1:5000");
        let b = addr("192.0.2.1:443");
        let k = ConnectionKey::normalize(a, b, true, vec![1, 2]);
        assert_eq!(k.client, a);
        let k2 = ConnectionKey::normalize(b, a, false, vec![1, 2]);
        assert_eq!(k, k2);
        assert_eq!(k.direction_of(a), Direction::ClientToServer);
        assert_eq!(k.direction_of(b), Direction::ServerToClient);
    }

    #[test]
    fn cid_disambiguates_identical_tuples() {
        let a = addr("10.0.0.1:5000");
        let b = addr("192.0.2.1:443");
        let k1 = ConnectionKey::normalize(a, b, true, vec![1; 8]);
        let k2 = ConnectionKey::normalize(a, b, true, vec![2; 8]);
        assert_ne!(k1, k2);
    }

    #[test]
    fn long_type_bits() {
        assert_eq!(LongPacketType::from_first_byte(0b1101_0001), LongPacketType::ZeroRtt);
        assert_eq!(LongPacketType::from_first_byte(0xc0), LongPacketType::Initial);
        assert_eq!(LongPacketType::from_first_byte(0xe0), LongPacketType::Handshake);
        assert_eq!(LongPacketType::from_first_byte(0xf0), LongPacketType::Retry);
    }

    #[test]
    fn timing_validation() {
        assert!(TimingConfig::default().validate().is_ok());
        let bad = TimingConfig { association_min_rtts: 30.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TimingConfig { idle_rtts: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(AnalyzerConfig::default().validate().is_ok());
    }
}
