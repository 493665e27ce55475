//! JSON-Lines and CSV record writers, and the JSON-Lines reader used by
//! the evaluation harness.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analyzer::OutputRecord;
use crate::connection::{ConnectionSummary, HttpObjectRecord, Record};
use crate::error::IngestError;
use crate::matcher::AssociationFlag;
use crate::model::Micros;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionRef {
    pub client: String,
    pub server: String,
    pub transport: String,
    pub quic_cid: String,
    pub generation: u32,
    pub client_inferred: bool,
}

/// Object record as written: absolute microseconds plus seconds since the
/// connection start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPayload {
    pub request_start_us: Micros,
    pub request_start_s: f64,
    pub request_end_us: Micros,
    pub request_end_s: f64,
    pub request_size: u64,
    pub request_packets: u32,
    pub response_start_us: Option<Micros>,
    pub response_start_s: Option<f64>,
    pub response_end_us: Option<Micros>,
    pub response_end_s: Option<f64>,
    pub response_size: u64,
    pub response_packets: u32,
    pub pair_count: u32,
    pub is_super: bool,
    pub zero_rtt: bool,
    pub association: AssociationFlag,
    pub rtt_s: f64,
    pub ack_len_window_up: Vec<u32>,
    pub ack_len_window_down: Vec<u32>,
    pub max_ack_len_up: Option<u32>,
    pub max_ack_len_down: Option<u32>,
    pub request_first_datagram: u64,
    pub request_last_datagram: u64,
    pub response_first_datagram: Option<u64>,
    pub response_last_datagram: Option<u64>,
}

fn offset_s(t: Micros, start: Micros) -> f64 {
    (t as f64 - start as f64) / 1e6
}

impl From<&HttpObjectRecord> for ObjectPayload {
    fn from(o: &HttpObjectRecord) -> Self {
        let start = o.connection_start_us;
        ObjectPayload {
            request_start_us: o.request_start_us,
            request_start_s: offset_s(o.request_start_us, start),
            request_end_us: o.request_end_us,
            request_end_s: offset_s(o.request_end_us, start),
            request_size: o.request_size,
            request_packets: o.request_packets,
            response_start_us: o.response_start_us,
            response_start_s: o.response_start_us.map(|t| offset_s(t, start)),
            response_end_us: o.response_end_us,
            response_end_s: o.response_end_us.map(|t| offset_s(t, start)),
            response_size: o.response_size,
            response_packets: o.response_packets,
            pair_count: o.pair_count,
            is_super: o.is_super,
            zero_rtt: o.zero_rtt,
            association: o.association,
            rtt_s: o.rtt_s,
            ack_len_window_up: o.ack_len_window_up.clone(),
            ack_len_window_down: o.ack_len_window_down.clone(),
            max_ack_len_up: o.ack_len_window_up.iter().copied().max(),
            max_ack_len_down: o.ack_len_window_down.iter().copied().max(),
            request_first_datagram: o.request_datagrams.0,
            request_last_datagram: o.request_datagrams.1,
            response_first_datagram: o.response_datagrams.map(|d| d.0),
            response_last_datagram: o.response_datagrams.map(|d| d.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record_type", content = "payload", rename_all = "snake_case")]
pub enum Payload {
    Object(ObjectPayload),
    Summary(ConnectionSummary),
}

/// One line of JSON-Lines output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub schema_version: String,
    pub connection: ConnectionRef,
    #[serde(flatten)]
    pub body: Payload,
}

impl From<&OutputRecord> for Envelope {
    fn from(r: &OutputRecord) -> Self {
        Envelope {
            schema_version: SCHEMA_VERSION.to_string(),
            connection: ConnectionRef {
                client: r.key.client.to_string(),
                server: r.key.server.to_string(),
                transport: "udp".to_string(),
                quic_cid: hex::encode(&r.key.cid),
                generation: r.generation,
                client_inferred: r.client_inferred,
            },
            body: match &r.record {
                Record::Object(o) => Payload::Object(o.into()),
                Record::Summary(s) => Payload::Summary(s.clone()),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

const ENVELOPE_COLUMNS: [&str; 8] =
    ["schema_version", "record_type", "client", "server", "transport", "quic_cid", "generation", "client_inferred"];

const OBJECT_COLUMNS: [&str; 25] = [
    "request_start_us",
    "request_start_s",
    "request_end_us",
    "request_end_s",
    "request_size",
    "request_packets",
    "response_start_us",
    "response_start_s",
    "response_end_us",
    "response_end_s",
    "response_size",
    "response_packets",
    "pair_count",
    "is_super",
    "zero_rtt",
    "association",
    "rtt_s",
    "ack_len_window_up",
    "ack_len_window_down",
    "max_ack_len_up",
    "max_ack_len_down",
    "request_first_datagram",
    "request_last_datagram",
    "response_first_datagram",
    "response_last_datagram",
];

const SUMMARY_COLUMNS: [&str; 23] = [
    "connection_start_us",
    "last_packet_us",
    "duration_s",
    "total_request_size",
    "total_response_size",
    "total_request_packets",
    "total_response_packets",
    "individual_pair_count",
    "estimated_object_count",
    "multiplexing_level",
    "no_objects",
    "zero_rtt_requests",
    "unmatched_response_size",
    "unmatched_response_packets",
    "rtt_used_s",
    "rtt_source",
    "rtt_samples",
    "mtu_up",
    "mtu_down",
    "handshake_complete",
    "client_inferred",
    "packet_count",
    "datagram_count",
];

/// Header row of CSV output: envelope columns, then object columns, then
/// summary columns. Cells that do not apply to a row are empty. The summary's
/// `client_inferred` shares the envelope column.
pub fn csv_header() -> Vec<&'static str> {
    let mut cols: Vec<&str> = ENVELOPE_COLUMNS.to_vec();
    cols.extend(OBJECT_COLUMNS);
    cols.extend(SUMMARY_COLUMNS.iter().filter(|c| !ENVELOPE_COLUMNS.contains(c)));
    cols
}

fn cell(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(items)) => items.iter().map(|i| cell(Some(i))).collect::<Vec<_>>().join(";"),
        Some(other) => other.to_string(),
    }
}

fn csv_row(env: &Envelope) -> Result<Vec<String>, serde_json::Error> {
    let conn = serde_json::to_value(&env.connection)?;
    let (record_type, payload) = match &env.body {
        Payload::Object(o) => ("object", serde_json::to_value(o)?),
        Payload::Summary(s) => ("summary", serde_json::to_value(s)?),
    };
    Ok(csv_header()
        .into_iter()
        .map(|col| match col {
            "schema_version" => env.schema_version.clone(),
            "record_type" => record_type.to_string(),
            c if ENVELOPE_COLUMNS.contains(&c) => cell(conn.get(c)),
            c => cell(payload.get(c)),
        })
        .collect())
}

/// Serializes records in either output format.
pub enum RecordWriter<W: Write> {
    Json(W),
    Csv(Box<csv::Writer<W>>),
}

impl<W: Write> RecordWriter<W> {
    pub fn new(inner: W, format: Format) -> Result<Self, IngestError> {
        Ok(match format {
            Format::Json => RecordWriter::Json(inner),
            Format::Csv => {
                let mut w = csv::Writer::from_writer(inner);
                w.write_record(csv_header()).map_err(csv_io)?;
                RecordWriter::Csv(Box::new(w))
            }
        })
    }

    pub fn write(&mut self, rec: &OutputRecord) -> Result<(), IngestError> {
        let env = Envelope::from(rec);
        match self {
            RecordWriter::Json(w) => {
                serde_json::to_writer(&mut *w, &env).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            RecordWriter::Csv(w) => {
                let row = csv_row(&env).map_err(std::io::Error::from)?;
                w.write_record(&row).map_err(csv_io)?;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<W, IngestError> {
        match self {
            RecordWriter::Json(mut w) => {
                w.flush()?;
                Ok(w)
            }
            RecordWriter::Csv(w) => w.into_inner().map_err(|e| IngestError::Io(e.into_error())),
        }
    }
}

fn csv_io(e: csv::Error) -> IngestError {
    IngestError::Io(std::io::Error::other(e))
}

/// Renders records as JSON-Lines into a string.
pub fn to_jsonl(records: &[OutputRecord]) -> String {
    let mut w = RecordWriter::new(Vec::new(), Format::Json).expect("in-memory writer");
    for r in records {
        w.write(r).expect("in-memory writer");
    }
    String::from_utf8(w.finish().expect("in-memory writer")).expect("JSON output is UTF-8")
}

/// Reads JSON-Lines output back.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Envelope>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let env: Envelope = serde_json::from_str(&line).map_err(|e| IngestError::malformed(format!("line {}", i + 1), e.to_string()))?;
        out.push(env);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConnectionKey;
    use crate::params::RttSource;

    fn object() -> OutputRecord {
        OutputRecord {
            key: ConnectionKey { client: "10.0.0.1:5000".parse().unwrap(), server: "192.0.2.1:443".parse().unwrap(), cid: vec![0xab, 0xcd] },
            generation: 0,
            client_inferred: true,
            record: Record::Object(HttpObjectRecord {
                connection_start_us: 1_000_000,
                request_start_us: 1_500_000,
                request_end_us: 1_500_000,
                request_size: 300,
                request_packets: 1,
                response_start_us: Some(1_650_000),
                response_end_us: Some(1_700_000),
                response_size: 4000,
                response_packets: 4,
                pair_count: 1,
                is_super: false,
                zero_rtt: false,
                association: AssociationFlag::Valid,
                rtt_s: 0.1,
                ack_len_window_up: vec![30, 34],
                ack_len_window_down: vec![],
                request_datagrams: (5, 5),
                response_datagrams: Some((6, 9)),
            }),
        }
    }

    fn summary() -> OutputRecord {
        OutputRecord {
            record: Record::Summary(ConnectionSummary {
                connection_start_us: 1_000_000,
                last_packet_us: 2_000_000,
                duration_s: 1.0,
                total_request_size: 300,
                total_response_size: 4000,
                total_request_packets: 1,
                total_response_packets: 4,
                individual_pair_count: 1,
                estimated_object_count: 1,
                multiplexing_level: 1.0,
                no_objects: false,
                zero_rtt_requests: 0,
                unmatched_response_size: 0,
                unmatched_response_packets: 0,
                rtt_used_s: 0.1,
                rtt_source: RttSource::HandshakeMeasured,
                rtt_samples: 1,
                mtu_up: 1200,
                mtu_down: 1252,
                handshake_complete: true,
                client_inferred: true,
                packet_count: 12,
                datagram_count: 11,
            }),
            ..object()
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let text = to_jsonl(&[object(), summary()]);
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with(r#"{"schema_version":"1","connection":{"client":"10.0.0.1:5000""#));
        assert!(lines[0].contains(r#""record_type":"object""#));
        assert!(lines[0].contains(r#""request_start_s":0.5"#));
        assert!(lines[0].contains(r#""quic_cid":"abcd""#));
        let back = read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back[0], Envelope::from(&object()));
        assert_eq!(back[1], Envelope::from(&summary()));
    }

    #[test]
    fn csv_covers_every_payload_field() {
        let header = csv_header();
        for rec in [object(), summary()] {
            let env = Envelope::from(&rec);
            let payload = match &env.body {
                Payload::Object(o) => serde_json::to_value(o).unwrap(),
                Payload::Summary(s) => serde_json::to_value(s).unwrap(),
            };
            for key in payload.as_object().unwrap().keys() {
                assert!(header.contains(&key.as_str()), "missing column {key}");
            }
        }
    }

    #[test]
    fn csv_matches_json_values() {
        let mut w = RecordWriter::new(Vec::new(), Format::Csv).unwrap();
        w.write(&object()).unwrap();
        w.write(&summary()).unwrap();
        let text = String::from_utf8(w.finish().unwrap()).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let headers = rdr.headers().unwrap().clone();
        let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
        let col = |row: &csv::StringRecord, name: &str| row[headers.iter().position(|h| h == name).unwrap()].to_string();
        assert_eq!(col(&rows[0], "record_type"), "object");
        assert_eq!(col(&rows[0], "response_size"), "4000");
        assert_eq!(col(&rows[0], "request_start_s"), "0.5");
        assert_eq!(col(&rows[0], "ack_len_window_up"), "30;34");
        assert_eq!(col(&rows[0], "association"), "valid");
        assert_eq!(col(&rows[0], "multiplexing_level"), "");
        assert_eq!(col(&rows[1], "multiplexing_level"), "1.0");
        assert_eq!(col(&rows[1], "rtt_source"), "handshake_measured");
        assert_eq!(col(&rows[1], "client_inferred"), "true");
    }
}
