//! Drives connections over a whole capture, online or offline.
//!
//! Both modes feed each flow the same packets and fire the same deadlines, and
//! both order the resulting records by (virtual time, trigger, connection key,
//! flow, generation, per-flow sequence). The online analyzer only releases a
//! record once no later input can produce anything that sorts before it, so
//! the two modes write identical output.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::path::Path;

use rayon::prelude::*;

use crate::connection::{ClassifiedPacket, Connection, Emission, Record, Trigger};
use crate::error::IngestError;
use crate::ingest::{Capture, DatagramSource, Demux, FlowId, FlowMeta};
use crate::model::{AnalyzerConfig, ConnectionKey, PacketRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Online,
    Offline,
}

/// A record tagged with the connection that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputRecord {
    pub key: ConnectionKey,
    pub generation: u32,
    pub client_inferred: bool,
    pub record: Record,
}

#[derive(Debug, Clone)]
struct Sequenced {
    time: f64,
    trigger: Trigger,
    flow: FlowId,
    generation: u32,
    seq: u64,
    out: OutputRecord,
}

impl Sequenced {
    fn sort_key(&self) -> (Trigger, &ConnectionKey, FlowId, u32, u64) {
        (self.trigger, &self.out.key, self.flow, self.generation, self.seq)
    }
}

impl Ord for Sequenced {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then_with(|| self.sort_key().cmp(&other.sort_key()))
    }
}

impl PartialOrd for Sequenced {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Sequenced {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Sequenced {}

/// One flow from the demultiplexer. An idle flow that sees traffic again is
/// reopened as a new generation under the same key.
struct FlowRunner {
    flow: FlowId,
    meta: FlowMeta,
    cfg: AnalyzerConfig,
    generation: u32,
    seq: u64,
    conn: Option<Connection>,
    keep_log: bool,
    log: Vec<ClassifiedPacket>,
}

impl FlowRunner {
    fn new(flow: FlowId, meta: FlowMeta, cfg: &AnalyzerConfig, keep_log: bool) -> Self {
        FlowRunner { flow, meta, cfg: *cfg, generation: 0, seq: 0, conn: None, keep_log, log: Vec::new() }
    }

    fn wrap(&mut self, emissions: Vec<Emission>, out: &mut Vec<Sequenced>) {
        for e in emissions {
            out.push(Sequenced {
                time: e.time,
                trigger: e.trigger,
                flow: self.flow,
                generation: self.generation,
                seq: self.seq,
                out: OutputRecord {
                    key: self.meta.key.clone(),
                    generation: self.generation,
                    client_inferred: self.meta.client_inferred,
                    record: e.record,
                },
            });
            self.seq += 1;
        }
    }

    fn next_deadline(&self) -> Option<f64> {
        self.conn.as_ref().and_then(Connection::next_deadline)
    }

    fn fire_next(&mut self, out: &mut Vec<Sequenced>) {
        if let Some(conn) = &mut self.conn {
            let e = conn.fire_next_deadline();
            self.wrap(e, out);
        }
    }

    fn process(&mut self, pkt: &PacketRecord, out: &mut Vec<Sequenced>) {
        if let Some(conn) = &mut self.conn {
            let e = conn.advance_to(pkt.timestamp_us as f64);
            self.wrap(e, out);
        }
        match &mut self.conn {
            Some(conn) if conn.is_closed() => {
                self.harvest_log();
                self.generation += 1;
                self.conn = Some(self.fresh());
            }
            Some(_) => {}
            None => self.conn = Some(self.fresh()),
        }
        let conn = self.conn.as_mut().expect("connection just ensured");
        let e = conn.process(pkt);
        self.wrap(e, out);
    }

    fn finish(&mut self, out: &mut Vec<Sequenced>) {
        if let Some(conn) = &mut self.conn {
            let e = conn.finish();
            self.wrap(e, out);
        }
        self.harvest_log();
    }

    fn fresh(&self) -> Connection {
        let conn = Connection::new(&self.cfg, self.meta.client_inferred);
        if self.keep_log {
            conn.with_log()
        } else {
            conn
        }
    }

    fn harvest_log(&mut self) {
        if let Some(conn) = &mut self.conn {
            self.log.extend(conn.take_log());
        }
    }
}

fn run_flow(flow: FlowId, meta: &FlowMeta, packets: &[PacketRecord], cfg: &AnalyzerConfig, keep_log: bool) -> (Vec<Sequenced>, Vec<ClassifiedPacket>) {
    let mut runner = FlowRunner::new(flow, meta.clone(), cfg, keep_log);
    let mut out = Vec::new();
    for p in packets {
        runner.process(p, &mut out);
    }
    runner.finish(&mut out);
    (out, runner.log)
}

/// Analyzes a fully read capture. Flows run in parallel; records are merged
/// into the shared output order.
pub fn analyze_offline(capture: &Capture, cfg: &AnalyzerConfig) -> Vec<OutputRecord> {
    offline(capture, cfg, false).0
}

/// Like [`analyze_offline`], also returning every packet's classification
/// tagged with its flow.
pub fn analyze_offline_with_log(capture: &Capture, cfg: &AnalyzerConfig) -> (Vec<OutputRecord>, Vec<(FlowId, ClassifiedPacket)>) {
    offline(capture, cfg, true)
}

fn offline(capture: &Capture, cfg: &AnalyzerConfig, keep_log: bool) -> (Vec<OutputRecord>, Vec<(FlowId, ClassifiedPacket)>) {
    let mut per_flow: Vec<Vec<PacketRecord>> = vec![Vec::new(); capture.flows.len()];
    for (flow, rec) in &capture.records {
        per_flow[*flow].push(rec.clone());
    }
    let results: Vec<_> = per_flow
        .par_iter()
        .enumerate()
        .map(|(flow, packets)| run_flow(flow, &capture.flows[flow], packets, cfg, keep_log))
        .collect();
    let mut all = Vec::new();
    let mut log = Vec::new();
    for (flow, (seq, flow_log)) in results.into_iter().enumerate() {
        all.extend(seq);
        log.extend(flow_log.into_iter().map(|c| (flow, c)));
    }
    all.sort();
    (all.into_iter().map(|s| s.out).collect(), log)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Timer {
    at: f64,
    flow: FlowId,
    version: u64,
}

impl Eq for Timer {}

impl Ord for Timer {
    fn cmp(&self, other: &Self) -> Ordering {
        self.at.total_cmp(&other.at).then(self.flow.cmp(&other.flow)).then(self.version.cmp(&other.version))
    }
}

impl PartialOrd for Timer {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Incremental analyzer fed one packet at a time in capture order.
pub struct OnlineAnalyzer {
    cfg: AnalyzerConfig,
    runners: Vec<Option<FlowRunner>>,
    versions: Vec<u64>,
    timers: BinaryHeap<Reverse<Timer>>,
    pending: BinaryHeap<Reverse<Sequenced>>,
}

impl OnlineAnalyzer {
    pub fn new(cfg: &AnalyzerConfig) -> Self {
        OnlineAnalyzer {
            cfg: *cfg,
            runners: Vec::new(),
            versions: Vec::new(),
            timers: BinaryHeap::new(),
            pending: BinaryHeap::new(),
        }
    }

    /// Number of connections currently holding state.
    pub fn open_connections(&self) -> usize {
        self.runners.iter().flatten().filter(|r| r.conn.as_ref().is_some_and(|c| !c.is_closed())).count()
    }

    /// Feeds one packet and returns every record that is now final.
    pub fn push(&mut self, flow: FlowId, meta: &FlowMeta, pkt: &PacketRecord) -> Vec<OutputRecord> {
        let now = pkt.timestamp_us as f64;
        let mut buf = Vec::new();
        while let Some(Reverse(top)) = self.timers.peek().copied() {
            if top.at >= now {
                break;
            }
            self.timers.pop();
            if self.versions[top.flow] != top.version {
                continue;
            }
            if let Some(r) = self.runners[top.flow].as_mut() {
                r.fire_next(&mut buf);
            }
            self.reschedule(top.flow);
        }

        if flow >= self.runners.len() {
            self.runners.resize_with(flow + 1, || None);
            self.versions.resize(flow + 1, 0);
        }
        let cfg = self.cfg;
        let runner = self.runners[flow].get_or_insert_with(|| FlowRunner::new(flow, meta.clone(), &cfg, false));
        runner.process(pkt, &mut buf);
        self.reschedule(flow);

        self.pending.extend(buf.into_iter().map(Reverse));
        self.release(|s| s.time < now)
    }

    /// Closes every connection and returns the remaining records.
    pub fn finish(&mut self) -> Vec<OutputRecord> {
        let mut buf = Vec::new();
        for r in self.runners.iter_mut().flatten() {
            r.finish(&mut buf);
        }
        self.timers.clear();
        self.pending.extend(buf.into_iter().map(Reverse));
        self.release(|_| true)
    }

    fn reschedule(&mut self, flow: FlowId) {
        self.versions[flow] += 1;
        if let Some(at) = self.runners[flow].as_ref().and_then(FlowRunner::next_deadline) {
            self.timers.push(Reverse(Timer { at, flow, version: self.versions[flow] }));
        }
    }

    fn release(&mut self, ready: impl Fn(&Sequenced) -> bool) -> Vec<OutputRecord> {
        let mut out = Vec::new();
        while let Some(Reverse(top)) = self.pending.peek() {
            if !ready(top) {
                break;
            }
            let Reverse(s) = self.pending.pop().expect("peeked");
            out.push(s.out);
        }
        out
    }
}

/// Feeds a capture's records through the online analyzer.
pub fn analyze_online(capture: &Capture, cfg: &AnalyzerConfig) -> Vec<OutputRecord> {
    let mut analyzer = OnlineAnalyzer::new(cfg);
    let mut out = Vec::new();
    for (flow, rec) in &capture.records {
        out.extend(analyzer.push(*flow, &capture.flows[*flow], rec));
    }
    out.extend(analyzer.finish());
    out
}

/// Streams a capture file and hands every record to `sink` as soon as it is
/// final. Offline mode reads the whole file first.
pub fn analyze_path<F>(path: &Path, cfg: &AnalyzerConfig, mode: Mode, mut sink: F) -> Result<(), IngestError>
where
    F: FnMut(OutputRecord) -> Result<(), IngestError>,
{
    match mode {
        Mode::Offline => {
            let capture = crate::ingest::stream_records(path)?;
            for r in analyze_offline(&capture, cfg) {
                sink(r)?;
            }
        }
        Mode::Online => {
            let mut source = DatagramSource::open(path)?;
            let mut demux = Demux::new();
            let mut analyzer = OnlineAnalyzer::new(cfg);
            while let Some(dg) = source.next_datagram(&mut demux)? {
                for (flow, rec) in demux.push(&dg) {
                    let meta = demux.flow(flow).clone();
                    for r in analyzer.push(flow, &meta, &rec) {
                        sink(r)?;
                    }
                }
            }
            for r in analyzer.finish() {
                sink(r)?;
            }
        }
    }
    Ok(())
}
