use std::fs::File;
use std::io::BufWriter;

use proptest::prelude::*;
use quiclens::analyzer::{analyze_offline, analyze_path, Mode, OutputRecord};
use quiclens::eval::score;
use quiclens::ingest::demux_all;
use quiclens::model::AnalyzerConfig;
use quiclens::output::{csv_header, read_jsonl, to_jsonl, Format, RecordWriter};
use quiclens::synth::{generate_corpus, CorpusConfig};
use serde_json::Value;

fn collect(path: &std::path::Path, mode: Mode) -> Vec<OutputRecord> {
    let mut out = Vec::new();
    analyze_path(path, &AnalyzerConfig::default(), mode, |r| {
        out.push(r);
        Ok(())
    })
    .unwrap();
    out
}

#[test]
fn pcap_and_qevents_agree() {
    let (trace, _) = generate_corpus(&CorpusConfig { connections: 18, loss_rate: 0.02, ..CorpusConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let pcap = dir.path().join("t.pcap");
    let qev = dir.path().join("t.qevents");
    trace.write_pcap(BufWriter::new(File::create(&pcap).unwrap())).unwrap();
    trace.write_qevents(BufWriter::new(File::create(&qev).unwrap())).unwrap();
    let expected = to_jsonl(&analyze_offline(&demux_all(trace.raw_datagrams()), &AnalyzerConfig::default()));
    for mode in [Mode::Offline, Mode::Online] {
        assert_eq!(to_jsonl(&collect(&pcap, mode)), expected, "pcap {mode:?}");
        assert_eq!(to_jsonl(&collect(&qev, mode)), expected, "qevents {mode:?}");
    }
}

/// Every CSV cell equals the matching JSON field, rendered the same way.
#[test]
fn csv_and_json_carry_the_same_values() {
    let (trace, _) = generate_corpus(&CorpusConfig { connections: 6, ..CorpusConfig::default() }).unwrap();
    let records = analyze_offline(&demux_all(trace.raw_datagrams()), &AnalyzerConfig::default());
    let mut w = RecordWriter::new(Vec::new(), Format::Csv).unwrap();
    for r in &records {
        w.write(r).unwrap();
    }
    let csv_bytes = w.finish().unwrap();
    let mut rdr = csv::Reader::from_reader(csv_bytes.as_slice());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header, csv_header());
    let json: Vec<Value> = to_jsonl(&records).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    for (row, v) in rdr.records().zip(&json) {
        let row = row.unwrap();
        for (col, cell) in header.iter().zip(row.iter()) {
            let field = v["connection"].get(col).or_else(|| v["payload"].get(col)).or_else(|| v.get(col));
            let rendered = match field {
                None | Some(Value::Null) => String::new(),
                Some(Value::String(s)) => s.clone(),
                Some(Value::Array(a)) => a.iter().map(Value::to_string).collect::<Vec<_>>().join(";"),
                Some(other) => other.to_string(),
            };
            if cell != rendered {
                // absent fields of the other record type are empty
                assert!(field.is_none() && cell.is_empty(), "column {col}: csv {cell:?} json {rendered:?}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Ratios stay in [0, 1], errors are non-negative, and shuffling the
    /// connections in the labels or records leaves the report unchanged.
    #[test]
    fn eval_is_bounded_and_order_independent(seed in 0u64..1000, loss in 0.0f64..0.1, rot in 0usize..50) {
        let cc = CorpusConfig { connections: 8, seed, loss_rate: loss, max_pairs: 3, ..CorpusConfig::default() };
        let (trace, mut labels) = generate_corpus(&cc).unwrap();
        let records = analyze_offline(&demux_all(trace.raw_datagrams()), &AnalyzerConfig::default());
        let mut env = read_jsonl(to_jsonl(&records).as_bytes()).unwrap();
        let base = score(&env, &labels).unwrap();
        let m = &base.aggregate;
        for r in [m.match_accuracy, m.request_size_accuracy, m.response_size_accuracy] {
            prop_assert!((0.0..=1.0).contains(&r));
        }
        for e in [m.request_start_error_s, m.response_start_error_s, m.response_end_error_s, m.max_time_error_rtt] {
            prop_assert!(e >= 0.0);
        }
        let n = env.len();
        env.rotate_left(rot % n);
        labels.connections.reverse();
        prop_assert_eq!(score(&env, &labels).unwrap(), base);
    }
}
