//! `.qevents`: a line-oriented text capture, one UDP datagram per line:
//!
//! ```text
//! ts_us dir src_ip src_port dst_ip dst_port hex_payload
//! ```
//!
//! `dir` (`c2s`, `s2c` or `-`) is informational; readers re-derive direction
//! from the flow. Blank lines and lines starting with `#` are ignored.

use std::io::{BufRead, Write};
use std::net::{IpAddr, SocketAddr};

use crate::error::IngestError;
use crate::ingest::pcap::RawDatagram;
use crate::model::{Direction, Micros};

pub struct QeventsReader<R> {
    inner: R,
    line_no: usize,
    next_index: u64,
    buf: String,
}

impl<R: BufRead> QeventsReader<R> {
    pub fn new(inner: R) -> Self {
        QeventsReader { inner, line_no: 0, next_index: 0, buf: String::new() }
    }

    pub fn next_datagram(&mut self) -> Result<Option<RawDatagram>, IngestError> {
        loop {
            self.buf.clear();
            if self.inner.read_line(&mut self.buf)? == 0 {
                return Ok(None);
            }
            self.line_no += 1;
            let line = self.buf.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let dg = parse_line(line, self.next_index)
                .map_err(|reason| IngestError::malformed(format!("line {}", self.line_no), reason))?;
            self.next_index += 1;
            return Ok(Some(dg));
        }
    }
}

fn parse_line(line: &str, index: u64) -> Result<RawDatagram, String> {
    let fields: Vec<&str> = line.split_ascii_whitespace().collect();
    if fields.len() != 7 {
        return Err(format!("expected 7 fields, found {}", fields.len()));
    }
    let timestamp_us: Micros = fields[0].parse().map_err(|e| format!("timestamp: {e}"))?;
    if !matches!(fields[1], "c2s" | "s2c" | "-") {
        return Err(format!("direction must be c2s, s2c or -, got {:?}", fields[1]));
    }
    let ip = |s: &str| s.parse::<IpAddr>().map_err(|e| format!("address {s:?}: {e}"));
    let port = |s: &str| s.parse::<u16>().map_err(|e| format!("port {s:?}: {e}"));
    let src = SocketAddr::new(ip(fields[2])?, port(fields[3])?);
    let dst = SocketAddr::new(ip(fields[4])?, port(fields[5])?);
    let payload = hex::decode(fields[6]).map_err(|e| format!("payload: {e}"))?;
    Ok(RawDatagram { index, timestamp_us, src, dst, payload })
}

pub fn write_event<W: Write>(
    out: &mut W,
    timestamp_us: Micros,
    dir: Option<Direction>,
    src: SocketAddr,
    dst: SocketAddr,
    payload: &[u8],
) -> std::io::Result<()> {
    writeln!(
        out,
        "{} {} {} {} {} {} {}",
        timestamp_us,
        dir.map_or("-", Direction::as_str),
        src.ip(),
        src.port(),
        dst.ip(),
        dst.port(),
        hex::encode(payload)
    )
}
