//! Capture input: pcap or `.qevents` files in, per-connection ordered
//! [`PacketRecord`]s out.

pub mod header;
pub mod pcap;
pub mod qevents;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::net::SocketAddr;
use std::path::Path;

use log::{debug, warn};
use serde::Serialize;

use crate::error::{IngestError, MalformedHeader};
use crate::model::{ConnectionKey, Direction, HeaderForm, LongPacketType, Micros, PacketRecord};

pub use header::{parse_header_facts, HeaderFacts};
pub use pcap::RawDatagram;

/// Port used as a hint when a flow shows no long header at all.
pub const QUIC_HINT_PORT: u16 = 443;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub frames: u64,
    pub non_udp: u64,
    pub non_quic: u64,
    pub malformed: u64,
    pub records: u64,
    /// Datagrams whose timestamp went backwards within a flow (clamped).
    pub reordered: u64,
}

pub type FlowId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowMeta {
    pub key: ConnectionKey,
    /// True when the client was identified from a long header rather than guessed.
    pub client_inferred: bool,
}

struct FlowState {
    meta: FlowMeta,
    known_cids: Vec<Vec<u8>>,
    next_position: u64,
    last_ts: Micros,
}

impl FlowState {
    fn learn_cid(&mut self, cid: &[u8]) {
        if !cid.is_empty() && !self.known_cids.iter().any(|c| c == cid) {
            self.known_cids.push(cid.to_vec());
        }
    }
}

/// Assigns datagrams to connections and expands them into per-packet records.
#[derive(Default)]
pub struct Demux {
    by_tuple: HashMap<(SocketAddr, SocketAddr), FlowId>,
    flows: Vec<FlowState>,
    stats: IngestStats,
}

fn tuple_of(a: SocketAddr, b: SocketAddr) -> (SocketAddr, SocketAddr) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Demux {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    pub fn flow(&self, id: FlowId) -> &FlowMeta {
        &self.flows[id].meta
    }

    pub fn flows(&self) -> impl Iterator<Item = &FlowMeta> {
        self.flows.iter().map(|f| &f.meta)
    }

    pub fn count_frame(&mut self, is_udp: bool) {
        self.stats.frames += 1;
        if !is_udp {
            self.stats.non_udp += 1;
        }
    }

    /// Parses one UDP datagram and returns its QUIC packet records, or an empty
    /// vector when the datagram is not QUIC or its framing is malformed.
    pub fn push(&mut self, dg: &RawDatagram) -> Vec<(FlowId, PacketRecord)> {
        let facts = match parse_header_facts(&dg.payload) {
            Ok(f) => f,
            Err(MalformedHeader::NotQuic | MalformedHeader::Empty) => {
                self.stats.non_quic += 1;
                return Vec::new();
            }
            Err(e) => {
                debug!("datagram {}: malformed QUIC header: {e}", dg.index);
                self.stats.malformed += 1;
                return Vec::new();
            }
        };
        let Some(id) = self.route(dg, &facts[0]) else {
            self.stats.non_quic += 1;
            return Vec::new();
        };

        let flow = &mut self.flows[id];
        let direction = flow.meta.key.direction_of(dg.src);
        for f in &facts {
            if let (Some(dcid), Some(scid)) = (&f.dcid, &f.scid) {
                if direction == Direction::ClientToServer {
                    flow.learn_cid(dcid);
                }
                flow.learn_cid(scid);
            }
        }
        let mut ts = dg.timestamp_us;
        if ts < flow.last_ts {
            self.stats.reordered += 1;
            ts = flow.last_ts;
        }
        flow.last_ts = ts;

        let n = facts.len() as u32;
        let mut out = Vec::with_capacity(facts.len());
        for f in facts {
            out.push((
                id,
                PacketRecord {
                    timestamp_us: ts,
                    direction,
                    udp_payload_len: dg.payload.len() as u32,
                    quic_packet_len: f.quic_packet_len,
                    header_form: f.header_form,
                    long_packet_type: f.long_packet_type,
                    quic_packets_in_datagram: n,
                    position_index: flow.next_position,
                    datagram_index: dg.index,
                },
            ));
            flow.next_position += 1;
        }
        self.stats.records += out.len() as u64;
        out
    }

    fn route(&mut self, dg: &RawDatagram, first: &HeaderFacts) -> Option<FlowId> {
        let tuple = tuple_of(dg.src, dg.dst);
        let existing = self.by_tuple.get(&tuple).copied();

        let opens_connection = first.header_form == HeaderForm::Long
            && matches!(first.long_packet_type, Some(LongPacketType::Initial | LongPacketType::ZeroRtt));
        if let Some(id) = existing {
            let flow = &self.flows[id];
            let from_client = dg.src == flow.meta.key.client;
            let fresh = opens_connection
                && from_client
                && first.dcid.as_ref().is_some_and(|d| !flow.known_cids.iter().any(|c| c == d));
            // a mid-capture flow has no CIDs; any client Initial starts a new connection
            let restarted = opens_connection && !flow.meta.client_inferred;
            if !fresh && !restarted {
                return Some(id);
            }
        }

        let meta = match first.header_form {
            HeaderForm::Long => FlowMeta {
                key: ConnectionKey::normalize(dg.src, dg.dst, true, first.dcid.clone().unwrap_or_default()),
                client_inferred: true,
            },
            HeaderForm::Short => {
                if dg.src.port() != QUIC_HINT_PORT && dg.dst.port() != QUIC_HINT_PORT {
                    return None;
                }
                let src_is_client = !(dg.src.port() == QUIC_HINT_PORT && dg.dst.port() != QUIC_HINT_PORT);
                FlowMeta { key: ConnectionKey::normalize(dg.src, dg.dst, src_is_client, Vec::new()), client_inferred: false }
            }
        };
        if existing.is_some() {
            debug!("new connection on reused tuple: {}", meta.key);
        }
        let id = self.flows.len();
        self.flows.push(FlowState { meta, known_cids: Vec::new(), next_position: 0, last_ts: 0 });
        self.by_tuple.insert(tuple, id);
        Some(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Pcap,
    Qevents,
}

impl InputFormat {
    /// Sniffs the pcap magic; anything else is read as `.qevents`.
    pub fn detect(path: &Path) -> Result<Self, IngestError> {
        let mut magic = [0u8; 4];
        let mut f = File::open(path)?;
        let n = f.read(&mut magic)?;
        let m = u32::from_le_bytes(magic);
        let pcap_magics = [0xa1b2_c3d4u32, 0xa1b2_3c4d, 0xd4c3_b2a1, 0x4d3c_b2a1];
        if n == 4 && pcap_magics.contains(&m) {
            return Ok(InputFormat::Pcap);
        }
        if path.extension().is_some_and(|e| e == "pcap" || e == "cap") {
            return Err(IngestError::malformed(path.display().to_string(), "not a classic pcap file"));
        }
        Ok(InputFormat::Qevents)
    }
}

pub enum DatagramSource {
    Pcap { reader: pcap::PcapReader<BufReader<File>>, next_index: u64 },
    Qevents(qevents::QeventsReader<BufReader<File>>),
}

impl DatagramSource {
    pub fn open(path: &Path) -> Result<Self, IngestError> {
        let format = InputFormat::detect(path)?;
        let file = BufReader::new(File::open(path)?);
        Ok(match format {
            InputFormat::Pcap => DatagramSource::Pcap { reader: pcap::PcapReader::new(file)?, next_index: 0 },
            InputFormat::Qevents => DatagramSource::Qevents(qevents::QeventsReader::new(file)),
        })
    }

    /// Next UDP datagram; frames that are not UDP are counted on `demux` and skipped.
    pub fn next_datagram(&mut self, demux: &mut Demux) -> Result<Option<RawDatagram>, IngestError> {
        match self {
            DatagramSource::Pcap { reader, next_index } => loop {
                let Some(frame) = reader.next_frame()? else { return Ok(None) };
                let index = *next_index;
                *next_index += 1;
                match reader.decode_udp(&frame, index) {
                    Some(dg) => {
                        demux.count_frame(true);
                        return Ok(Some(dg));
                    }
                    None => demux.count_frame(false),
                }
            },
            DatagramSource::Qevents(r) => {
                let dg = r.next_datagram()?;
                if dg.is_some() {
                    demux.count_frame(true);
                }
                Ok(dg)
            }
        }
    }
}

/// A fully read capture, with records in capture order.
#[derive(Debug, Clone)]
pub struct Capture {
    pub flows: Vec<FlowMeta>,
    pub records: Vec<(FlowId, PacketRecord)>,
    pub stats: IngestStats,
}

impl Capture {
    pub fn records_of(&self, id: FlowId) -> impl Iterator<Item = &PacketRecord> {
        self.records.iter().filter(move |(f, _)| *f == id).map(|(_, r)| r)
    }
}

/// Reads a datagram sequence to completion.
pub fn demux_all<I>(datagrams: I) -> Capture
where
    I: IntoIterator<Item = RawDatagram>,
{
    let mut demux = Demux::new();
    let mut records = Vec::new();
    for dg in datagrams {
        demux.count_frame(true);
        records.extend(demux.push(&dg));
    }
    finish(demux, records)
}

/// Reads every record of a pcap or `.qevents` file.
pub fn stream_records(path: &Path) -> Result<Capture, IngestError> {
    let mut source = DatagramSource::open(path)?;
    let mut demux = Demux::new();
    let mut records = Vec::new();
    while let Some(dg) = source.next_datagram(&mut demux)? {
        records.extend(demux.push(&dg));
    }
    Ok(finish(demux, records))
}

fn finish(demux: Demux, records: Vec<(FlowId, PacketRecord)>) -> Capture {
    let stats = demux.stats();
    if stats.malformed > 0 {
        warn!("{} datagrams had malformed QUIC headers", stats.malformed);
    }
    Capture { flows: demux.flows().cloned().collect(), records, stats }
}
