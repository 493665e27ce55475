//! Labeled synthetic QUIC traces.
//!
//! Each scenario produces one connection: a handshake (or a 0-RTT opening),
//! then request/response exchanges shaped after a traffic pattern, with client
//! ACKs whose size grows as downstream losses open new ACK ranges. Every
//! datagram carries a ground-truth role and, for data, the pair it belongs to.

mod builder;
pub mod packet;

use std::io::{self, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::ingest::pcap::PcapWriter;
use crate::ingest::qevents::write_event;
use crate::ingest::RawDatagram;
use crate::model::{Direction, LongPacketType, Micros};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    VideoSequential,
    WebMultiplexed,
    Login,
    BulkDownload,
    BulkUpload,
    ZeroRttResume,
}

impl Pattern {
    pub const ALL: [Pattern; 6] = [
        Pattern::VideoSequential,
        Pattern::WebMultiplexed,
        Pattern::Login,
        Pattern::BulkDownload,
        Pattern::BulkUpload,
        Pattern::ZeroRttResume,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub rtt_s: f64,
    pub mtu_up: u32,
    pub mtu_down: u32,
    pub pattern: Pattern,
    pub n_pairs: u32,
    /// Probability that a downstream data packet is lost before the monitor.
    pub loss_rate: f64,
    /// The client acknowledges every `ack_every` response packets.
    pub ack_every: u32,
    pub seed: u64,
    /// For `WebMultiplexed`: overlap the responses of consecutive requests.
    pub interleave: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            rtt_s: 0.1,
            mtu_up: 1252,
            mtu_down: 1252,
            pattern: Pattern::VideoSequential,
            n_pairs: 2,
            loss_rate: 0.0,
            ack_every: 2,
            seed: 1,
            interleave: false,
        }
    }
}

pub const MTU_RANGE: (u32, u32) = (1200, 1360);

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.rtt_s.is_finite() && self.rtt_s > 0.0) {
            return Err(ConfigError::new(format!("rtt must be positive, got {}", self.rtt_s)));
        }
        if self.rtt_s < 0.001 || self.rtt_s > 5.0 {
            return Err(ConfigError::new(format!("rtt {} s outside the supported range [0.001, 5]", self.rtt_s)));
        }
        for (name, mtu) in [("mtu_up", self.mtu_up), ("mtu_down", self.mtu_down)] {
            if !(MTU_RANGE.0..=MTU_RANGE.1).contains(&mtu) {
                return Err(ConfigError::new(format!("{name} {mtu} outside [{}, {}]", MTU_RANGE.0, MTU_RANGE.1)));
            }
        }
        if !(0.0..1.0).contains(&self.loss_rate) {
            return Err(ConfigError::new(format!("loss_rate must be in [0, 1), got {}", self.loss_rate)));
        }
        if self.n_pairs == 0 {
            return Err(ConfigError::new("n_pairs must be at least 1"));
        }
        if self.ack_every == 0 {
            return Err(ConfigError::new("ack_every must be at least 1"));
        }
        if self.interleave && self.pattern != Pattern::WebMultiplexed {
            return Err(ConfigError::new("interleave only applies to the web_multiplexed pattern"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Handshake,
    RequestData,
    ResponseData,
    Ack,
    Control,
}

impl Role {
    pub fn is_data(self) -> bool {
        matches!(self, Role::RequestData | Role::ResponseData)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthDatagram {
    pub timestamp_us: Micros,
    pub src: SocketAddr,
    pub dst: SocketAddr,
    pub payload: Vec<u8>,
    pub role: Role,
    pub pair: Option<u32>,
    pub connection: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatagramLabel {
    pub ordinal: u64,
    pub connection: u32,
    pub role: Role,
    pub pair: Option<u32>,
}

/// Ground truth of one request/response pair, derived from the labeled datagrams.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTruth {
    pub pair: u32,
    pub zero_rtt: bool,
    pub request_start_us: Micros,
    pub request_end_us: Micros,
    pub request_size: u64,
    pub request_packets: u32,
    pub response_start_us: Option<Micros>,
    pub response_end_us: Option<Micros>,
    pub response_size: u64,
    pub response_packets: u32,
    pub request_datagrams: Vec<u64>,
    pub response_datagrams: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionLabels {
    pub connection: u32,
    pub client: String,
    pub server: String,
    pub scenario: ScenarioConfig,
    pub pairs: Vec<PairTruth>,
}

/// Contents of `labels.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub datagrams: Vec<DatagramLabel>,
    pub connections: Vec<ConnectionLabels>,
}

impl Labels {
    pub fn write_json<W: Write>(&self, out: W) -> io::Result<()> {
        serde_json::to_writer_pretty(out, self).map_err(io::Error::from)
    }

    pub fn read_json<R: io::Read>(input: R) -> io::Result<Self> {
        serde_json::from_reader(input).map_err(io::Error::from)
    }
}

/// Datagrams in capture order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    pub datagrams: Vec<SynthDatagram>,
}

impl Trace {
    pub fn raw_datagrams(&self) -> Vec<RawDatagram> {
        self.datagrams
            .iter()
            .enumerate()
            .map(|(i, d)| RawDatagram { index: i as u64, timestamp_us: d.timestamp_us, src: d.src, dst: d.dst, payload: d.payload.clone() })
            .collect()
    }

    pub fn write_qevents<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# ts_us dir src_ip src_port dst_ip dst_port payload_hex")?;
        for d in &self.datagrams {
            let dir = if d.src.port() == SERVER_PORT { Direction::ServerToClient } else { Direction::ClientToServer };
            write_event(&mut out, d.timestamp_us, Some(dir), d.src, d.dst, &d.payload)?;
        }
        Ok(())
    }

    pub fn write_pcap<W: Write>(&self, out: W) -> io::Result<W> {
        let mut w = PcapWriter::new(out)?;
        for d in &self.datagrams {
            w.write_udp(d.timestamp_us, d.src, d.dst, &d.payload)?;
        }
        Ok(w.into_inner())
    }
}

const SERVER_PORT: u16 = 443;

fn client_addr(i: u32) -> SocketAddr {
    let ip = Ipv4Addr::from(0x0a00_0001 + i);
    SocketAddr::new(IpAddr::V4(ip), 49152 + (i % 16000) as u16)
}

fn server_addr(i: u32) -> SocketAddr {
    SocketAddr::new(IpAddr::V4(Ipv4Addr::new(192, 0, 2, 1 + (i % 250) as u8)), SERVER_PORT)
}

/// Generates one labeled connection starting at time zero.
pub fn generate(cfg: &ScenarioConfig) -> Result<(Trace, Labels), ConfigError> {
    cfg.validate()?;
    let datagrams = builder::build(cfg, 0, client_addr(0), server_addr(0), 0);
    Ok(assemble(datagrams, &[(*cfg, client_addr(0), server_addr(0))]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub connections: u32,
    pub seed: u64,
    pub loss_rate: f64,
    pub patterns: Vec<Pattern>,
    pub rtts_s: Vec<f64>,
    pub mtus: Vec<u32>,
    pub max_pairs: u32,
    pub ack_every: u32,
    /// Connection start times are spread uniformly over this many seconds.
    pub spread_s: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            connections: 240,
            seed: 7,
            loss_rate: 0.0,
            patterns: Pattern::ALL.to_vec(),
            rtts_s: vec![0.01, 0.03, 0.1, 0.25, 0.6],
            mtus: vec![1200, 1252, 1350],
            max_pairs: 5,
            ack_every: 2,
            spread_s: 5.0,
        }
    }
}

impl CorpusConfig {
    /// The scenario of every connection, cycling through the patterns.
    pub fn scenarios(&self) -> Result<Vec<ScenarioConfig>, ConfigError> {
        if self.connections == 0 {
            return Err(ConfigError::new("corpus needs at least one connection"));
        }
        if self.patterns.is_empty() || self.rtts_s.is_empty() || self.mtus.is_empty() {
            return Err(ConfigError::new("patterns, rtts and mtus must be non-empty"));
        }
        if self.max_pairs == 0 {
            return Err(ConfigError::new("max_pairs must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.connections as usize);
        for i in 0..self.connections {
            let cfg = ScenarioConfig {
                rtt_s: *self.rtts_s.choose(&mut rng).expect("non-empty"),
                mtu_up: *self.mtus.choose(&mut rng).expect("non-empty"),
                mtu_down: *self.mtus.choose(&mut rng).expect("non-empty"),
                pattern: self.patterns[i as usize % self.patterns.len()],
                n_pairs: rng.gen_range(1..=self.max_pairs),
                loss_rate: self.loss_rate,
                ack_every: self.ack_every,
                seed: rng.gen(),
                interleave: false,
            };
            cfg.validate()?;
            out.push(cfg);
        }
        Ok(out)
    }
}

/// Generates a corpus of independent connections merged into one trace.
pub fn generate_corpus(cc: &CorpusConfig) -> Result<(Trace, Labels), ConfigError> {
    if !(cc.spread_s.is_finite() && cc.spread_s >= 0.0) {
        return Err(ConfigError::new("spread must be non-negative"));
    }
    let scenarios = cc.scenarios()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cc.seed ^ 0x5eed);
    let mut all = Vec::new();
    let mut meta = Vec::with_capacity(scenarios.len());
    for (i, cfg) in scenarios.iter().enumerate() {
        let i = i as u32;
        let start = (rng.gen::<f64>() * cc.spread_s * 1e6) as Micros;
        let (client, server) = (client_addr(i), server_addr(i));
        all.extend(builder::build(cfg, start, client, server, i));
        meta.push((*cfg, client, server));
    }
    Ok(assemble(all, &meta))
}

/// Orders datagrams by time (stable, so each connection keeps its own order)
/// and derives the labels from the final ordinals.
fn assemble(mut datagrams: Vec<SynthDatagram>, meta: &[(ScenarioConfig, SocketAddr, SocketAddr)]) -> (Trace, Labels) {
    datagrams.sort_by_key(|d| d.timestamp_us);
    let mut connections: Vec<ConnectionLabels> = meta
        .iter()
        .enumerate()
        .map(|(i, (cfg, client, server))| ConnectionLabels {
            connection: i as u32,
            client: client.to_string(),
            server: server.to_string(),
            scenario: *cfg,
            pairs: Vec::new(),
        })
        .collect();
    let mut labels = Vec::with_capacity(datagrams.len());
    for (ordinal, d) in datagrams.iter().enumerate() {
        let ordinal = ordinal as u64;
        labels.push(DatagramLabel { ordinal, connection: d.connection, role: d.role, pair: d.pair });
        let (Some(pair), true) = (d.pair, d.role.is_data()) else {
            continue;
        };
        let pairs = &mut connections[d.connection as usize].pairs;
        if pairs.len() <= pair as usize {
            pairs.resize_with(pair as usize + 1, PairTruth::default);
        }
        let p = &mut pairs[pair as usize];
        p.pair = pair;
        let len = d.payload.len() as u64;
        if d.role == Role::RequestData {
            if p.request_datagrams.is_empty() {
                p.request_start_us = d.timestamp_us;
                p.zero_rtt = d.payload[0] & 0x80 != 0 && LongPacketType::from_first_byte(d.payload[0]) == LongPacketType::ZeroRtt;
            }
            p.request_end_us = d.timestamp_us;
            p.request_size += len;
            p.request_packets += 1;
            p.request_datagrams.push(ordinal);
        } else {
            p.response_start_us.get_or_insert(d.timestamp_us);
            p.response_end_us = Some(d.timestamp_us);
            p.response_size += len;
            p.response_packets += 1;
            p.response_datagrams.push(ordinal);
        }
    }
    (Trace { datagrams }, Labels { datagrams: labels, connections })
}
