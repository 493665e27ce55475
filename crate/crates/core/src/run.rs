use crate::model::{Micros, PacketRecord};

/// Accumulated member packets of an estimate under construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketRun {
    pub start_us: Micros,
    pub last_us: Micros,
    pub size: u64,
    pub packets: u32,
    pub first_datagram: u64,
    pub last_datagram: u64,
}

impl PacketRun {
    pub fn new(pkt: &PacketRecord) -> Self {
        PacketRun {
            start_us: pkt.timestamp_us,
            last_us: pkt.timestamp_us,
            size: u64::from(pkt.quic_packet_len),
            packets: 1,
            first_datagram: pkt.datagram_index,
            last_datagram: pkt.datagram_index,
        }
    }

    pub fn push(&mut self, pkt: &PacketRecord) {
        self.last_us = pkt.timestamp_us;
        self.size += u64::from(pkt.quic_packet_len);
        self.packets += 1;
        self.last_datagram = pkt.datagram_index;
    }
}

/// How a data packet's length compares with the MTU of its direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeClass {
    /// Longer than MTU minus the slack.
    Large,
    Small,
}

impl SizeClass {
    pub fn of(len: u32, mtu: u32, slack: u32) -> Self {
        if len > mtu.saturating_sub(slack) {
            SizeClass::Large
        } else {
            SizeClass::Small
        }
    }
}

/// Deadline (in fractional microseconds) `k` RTTs after `last_us`.
pub fn deadline_after(last_us: Micros, rtt_s: f64, k: f64) -> f64 {
    last_us as f64 + k * rtt_s * 1e6
}
