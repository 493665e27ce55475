//! Scores analyzer output against synthetic ground truth.
//!
//! Each true pair is aligned to the estimated object (of the same client)
//! whose request datagram span contains the pair's first request datagram. A
//! pair is correctly matched when all of its request datagrams fall inside
//! that object's request span and all of its response datagrams inside the
//! object's response span. Size accuracy compares each object with the summed
//! truth of the pairs aligned to it; every pair inherits its object's score
//! (zero when unaligned). Time errors compare each aligned object with the
//! earliest start and latest end of its pairs.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::output::{Envelope, ObjectPayload, Payload};
use crate::synth::{ConnectionLabels, Labels, PairTruth};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub true_pairs: u64,
    pub correct_pairs: u64,
    pub estimated_objects: u64,
    pub aligned_objects: u64,
    pub spurious_object_count: u64,
    pub match_accuracy: f64,
    pub request_size_accuracy: f64,
    pub response_size_accuracy: f64,
    pub request_start_error_s: f64,
    pub request_start_error_rtt: f64,
    pub response_start_error_s: f64,
    pub response_start_error_rtt: f64,
    pub response_end_error_s: f64,
    pub response_end_error_rtt: f64,
    pub max_time_error_rtt: f64,
}

#[derive(Debug, Clone, Default)]
struct Acc {
    pairs: u64,
    correct: u64,
    req_size_acc: f64,
    resp_size_acc: f64,
    objects: u64,
    aligned: u64,
    /// Sums of absolute errors: seconds and RTT multiples, with sample counts.
    req_start: (f64, f64, u64),
    resp_start: (f64, f64, u64),
    resp_end: (f64, f64, u64),
    max_rtt: f64,
}

fn mean(sum: f64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl Acc {
    fn add(&mut self, o: &Acc) {
        self.pairs += o.pairs;
        self.correct += o.correct;
        self.req_size_acc += o.req_size_acc;
        self.resp_size_acc += o.resp_size_acc;
        self.objects += o.objects;
        self.aligned += o.aligned;
        for (a, b) in [(&mut self.req_start, o.req_start), (&mut self.resp_start, o.resp_start), (&mut self.resp_end, o.resp_end)] {
            a.0 += b.0;
            a.1 += b.1;
            a.2 += b.2;
        }
        self.max_rtt = self.max_rtt.max(o.max_rtt);
    }

    fn time_error(&mut self, which: fn(&mut Acc) -> &mut (f64, f64, u64), est_us: u64, true_us: u64, rtt_s: f64) {
        let err_s = est_us.abs_diff(true_us) as f64 / 1e6;
        let err_rtt = err_s / rtt_s;
        let slot = which(self);
        slot.0 += err_s;
        slot.1 += err_rtt;
        slot.2 += 1;
        self.max_rtt = self.max_rtt.max(err_rtt);
    }

    fn finish(&self) -> Metrics {
        let p = self.pairs;
        Metrics {
            true_pairs: p,
            correct_pairs: self.correct,
            estimated_objects: self.objects,
            aligned_objects: self.aligned,
            spurious_object_count: self.objects - self.aligned,
            match_accuracy: mean(self.correct as f64, p),
            request_size_accuracy: mean(self.req_size_acc, p),
            response_size_accuracy: mean(self.resp_size_acc, p),
            request_start_error_s: mean(self.req_start.0, self.req_start.2),
            request_start_error_rtt: mean(self.req_start.1, self.req_start.2),
            response_start_error_s: mean(self.resp_start.0, self.resp_start.2),
            response_start_error_rtt: mean(self.resp_start.1, self.resp_start.2),
            response_end_error_s: mean(self.resp_end.0, self.resp_end.2),
            response_end_error_rtt: mean(self.resp_end.1, self.resp_end.2),
            max_time_error_rtt: self.max_rtt,
        }
    }
}

/// `1 - min(1, |est - truth| / truth)`; an empty truth only matches an empty estimate.
pub fn size_accuracy(est: u64, truth: u64) -> f64 {
    if truth == 0 {
        return if est == 0 { 1.0 } else { 0.0 };
    }
    1.0 - (est.abs_diff(truth) as f64 / truth as f64).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionReport {
    pub connection: u32,
    pub client: String,
    pub pattern: crate::synth::Pattern,
    pub rtt_s: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregate: Metrics,
    pub per_pattern: BTreeMap<String, Metrics>,
    pub connections: Vec<ConnectionReport>,
}

fn within(d: u64, span: Option<(u64, u64)>) -> bool {
    span.is_some_and(|(a, b)| a <= d && d <= b)
}

fn score_connection(conn: &ConnectionLabels, objects: &[&ObjectPayload]) -> Acc {
    let rtt = conn.scenario.rtt_s;
    let mut acc = Acc { objects: objects.len() as u64, ..Acc::default() };
    let mut aligned: Vec<Vec<&PairTruth>> = vec![Vec::new(); objects.len()];
    let mut pair_object = Vec::with_capacity(conn.pairs.len());
    for pair in &conn.pairs {
        let Some(&first) = pair.request_datagrams.first() else {
            continue;
        };
        acc.pairs += 1;
        let idx = objects.iter().position(|o| within(first, Some((o.request_first_datagram, o.request_last_datagram))));
        pair_object.push(idx);
        let Some(i) = idx else {
            continue;
        };
        aligned[i].push(pair);
        let o = objects[i];
        let req_span = Some((o.request_first_datagram, o.request_last_datagram));
        let resp_span = o.response_first_datagram.zip(o.response_last_datagram);
        let correct = pair.request_datagrams.iter().all(|&d| within(d, req_span))
            && pair.response_datagrams.iter().all(|&d| within(d, resp_span));
        acc.correct += u64::from(correct);
    }

    let mut object_size_acc = vec![(0.0, 0.0); objects.len()];
    for (i, (o, pairs)) in objects.iter().zip(&aligned).enumerate() {
        if pairs.is_empty() {
            continue;
        }
        acc.aligned += 1;
        let req_true: u64 = pairs.iter().map(|p| p.request_size).sum();
        let resp_true: u64 = pairs.iter().map(|p| p.response_size).sum();
        object_size_acc[i] = (size_accuracy(o.request_size, req_true), size_accuracy(o.response_size, resp_true));

        let req_start = pairs.iter().map(|p| p.request_start_us).min().expect("non-empty");
        acc.time_error(|a| &mut a.req_start, o.request_start_us, req_start, rtt);
        let resp_start = pairs.iter().filter_map(|p| p.response_start_us).min();
        if let (Some(est), Some(truth)) = (o.response_start_us, resp_start) {
            acc.time_error(|a| &mut a.resp_start, est, truth, rtt);
        }
        let resp_end = pairs.iter().filter_map(|p| p.response_end_us).max();
        if let (Some(est), Some(truth)) = (o.response_end_us, resp_end) {
            acc.time_error(|a| &mut a.resp_end, est, truth, rtt);
        }
    }
    for idx in pair_object.into_iter().flatten() {
        acc.req_size_acc += object_size_acc[idx].0;
        acc.resp_size_acc += object_size_acc[idx].1;
    }
    acc
}

/// Scores the records of one analyzer run against the labels of its trace.
pub fn score(records: &[Envelope], labels: &Labels) -> Result<EvalReport, EvalError> {
    let known: HashMap<&str, &ConnectionLabels> = labels.connections.iter().map(|c| (c.client.as_str(), c)).collect();
    let mut objects: HashMap<&str, Vec<&ObjectPayload>> = HashMap::new();
    let mut datagrams = 0u64;
    for env in records {
        let client = env.connection.client.as_str();
        if !known.contains_key(client) {
            return Err(EvalError::LabelMismatch(format!("output has a connection from {client} that the labels do not know")));
        }
        match &env.body {
            Payload::Object(o) => objects.entry(client).or_default().push(o),
            Payload::Summary(s) => datagrams += s.datagram_count,
        }
    }
    let labeled = labels.datagrams.len() as u64;
    if datagrams != labeled {
        return Err(EvalError::LabelMismatch(format!("output covers {datagrams} datagrams, labels describe {labeled}")));
    }

    let mut conns: Vec<&ConnectionLabels> = labels.connections.iter().collect();
    conns.sort_by(|a, b| a.client.cmp(&b.client));
    let scored: Vec<(&ConnectionLabels, Acc)> = conns
        .par_iter()
        .map(|conn| {
            let mut objs = objects.get(conn.client.as_str()).cloned().unwrap_or_default();
            objs.sort_by_key(|o| (o.request_start_us, o.request_first_datagram));
            (*conn, score_connection(conn, &objs))
        })
        .collect();
    let mut total = Acc::default();
    let mut by_pattern: BTreeMap<String, Acc> = BTreeMap::new();
    let mut reports = Vec::with_capacity(scored.len());
    for (conn, acc) in scored {
        total.add(&acc);
        let pattern = serde_json::to_value(conn.scenario.pattern).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        by_pattern.entry(pattern).or_default().add(&acc);
        reports.push(ConnectionReport {
            connection: conn.connection,
            client: conn.client.clone(),
            pattern: conn.scenario.pattern,
            rtt_s: conn.scenario.rtt_s,
            metrics: acc.finish(),
        });
    }
    reports.sort_by_key(|r| r.connection);
    Ok(EvalReport {
        aggregate: total.finish(),
        per_pattern: by_pattern.into_iter().map(|(k, v)| (k, v.finish())).collect(),
        connections: reports,
    })
}

/// Human-readable summary table: one row per pattern plus the total.
pub fn render_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<18} {:>6} {:>7} {:>7} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9}",
        "pattern", "pairs", "objects", "match", "req_size", "resp_sz", "req_st", "resp_st", "resp_end", "spurious"
    );
    let rows = report.per_pattern.iter().map(|(k, m)| (k.as_str(), m)).chain(std::iter::once(("all", &report.aggregate)));
    for (name, m) in rows {
        let _ = writeln!(
            s,
            "{:<18} {:>6} {:>7} {:>7.4} {:>8.4} {:>8.4} {:>8.3}R {:>8.3}R {:>8.3}R {:>9}",
            name,
            m.true_pairs,
            m.estimated_objects,
            m.match_accuracy,
            m.request_size_accuracy,
            m.response_size_accuracy,
            m.request_start_error_rtt,
            m.response_start_error_rtt,
            m.response_end_error_rtt,
            m.spurious_object_count
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::AssociationFlag;
    use crate::output::ConnectionRef;
    use crate::params::RttSource;
    use crate::synth::{DatagramLabel, Role, ScenarioConfig};

    const CLIENT: &str = "10.0.0.1:50000";

    /// Pair `i` uses request datagram 10i and response datagrams 10i+1..=10i+3.
    fn pair(i: u32, resp_size: u64) -> PairTruth {
        let b = u64::from(i) * 10;
        PairTruth {
            pair: i,
            zero_rtt: false,
            request_start_us: b * 1000,
            request_end_us: b * 1000,
            request_size: 400,
            request_packets: 1,
            response_start_us: Some((b + 1) * 1000),
            response_end_us: Some((b + 3) * 1000),
            response_size: resp_size,
            response_packets: 3,
            request_datagrams: vec![b],
            response_datagrams: vec![b + 1, b + 2, b + 3],
        }
    }

    fn labels(pairs: Vec<PairTruth>, datagrams: u64) -> Labels {
        Labels {
            datagrams: (0..datagrams).map(|o| DatagramLabel { ordinal: o, connection: 0, role: Role::Control, pair: None }).collect(),
            connections: vec![ConnectionLabels {
                connection: 0,
                client: CLIENT.into(),
                server: "192.0.2.1:443".into(),
                scenario: ScenarioConfig::default(),
                pairs,
            }],
        }
    }

    fn conn() -> ConnectionRef {
        ConnectionRef {
            client: CLIENT.into(),
            server: "192.0.2.1:443".into(),
            transport: "udp".into(),
            quic_cid: String::new(),
            generation: 0,
            client_inferred: true,
        }
    }

    /// An object spanning the given pairs exactly.
    fn object(pairs: &[PairTruth], req_size: u64, resp_size: u64) -> Envelope {
        let first = &pairs[0];
        let last = pairs.last().unwrap();
        Envelope {
            schema_version: "1".into(),
            connection: conn(),
            body: Payload::Object(ObjectPayload {
                request_start_us: first.request_start_us,
                request_start_s: 0.0,
                request_end_us: last.request_end_us,
                request_end_s: 0.0,
                request_size: req_size,
                request_packets: pairs.len() as u32,
                response_start_us: first.response_start_us,
                response_start_s: None,
                response_end_us: last.response_end_us,
                response_end_s: None,
                response_size: resp_size,
                response_packets: 3,
                pair_count: pairs.len() as u32,
                is_super: pairs.len() > 1,
                zero_rtt: false,
                association: AssociationFlag::Valid,
                rtt_s: 0.1,
                ack_len_window_up: vec![],
                ack_len_window_down: vec![],
                max_ack_len_up: None,
                max_ack_len_down: None,
                request_first_datagram: first.request_datagrams[0],
                request_last_datagram: *last.request_datagrams.last().unwrap(),
                response_first_datagram: Some(first.response_datagrams[0]),
                response_last_datagram: Some(*last.response_datagrams.last().unwrap()),
            }),
        }
    }

    fn summary(datagrams: u64) -> Envelope {
        Envelope {
            schema_version: "1".into(),
            connection: conn(),
            body: Payload::Summary(crate::connection::ConnectionSummary {
                connection_start_us: 0,
                last_packet_us: 0,
                duration_s: 0.0,
                total_request_size: 0,
                total_response_size: 0,
                total_request_packets: 0,
                total_response_packets: 0,
                individual_pair_count: 0,
                estimated_object_count: 0,
                multiplexing_level: 1.0,
                no_objects: true,
                zero_rtt_requests: 0,
                unmatched_response_size: 0,
                unmatched_response_packets: 0,
                rtt_used_s: 0.1,
                rtt_source: RttSource::ConfigDefault,
                rtt_samples: 0,
                mtu_up: 1200,
                mtu_down: 1200,
                handshake_complete: true,
                client_inferred: true,
                packet_count: datagrams,
                datagram_count: datagrams,
            }),
        }
    }

    #[test]
    fn perfect_reconstruction() {
        let pairs: Vec<_> = (0..4).map(|i| pair(i, 5000)).collect();
        let mut out: Vec<_> = pairs.iter().map(|p| object(std::slice::from_ref(p), 400, 5000)).collect();
        out.push(summary(40));
        let r = score(&out, &labels(pairs, 40)).unwrap();
        let m = &r.aggregate;
        assert_eq!(m.match_accuracy, 1.0);
        assert_eq!((m.request_size_accuracy, m.response_size_accuracy), (1.0, 1.0));
        assert_eq!(m.max_time_error_rtt, 0.0);
        assert_eq!(m.spurious_object_count, 0);
    }

    #[test]
    fn wrongly_merged_pair() {
        let pairs: Vec<_> = (0..4).map(|i| pair(i, 5000)).collect();
        // pair 3's request is absorbed by pair 2's object, its response is not
        let mut merged = object(&pairs[2..4], 800, 5000);
        if let Payload::Object(o) = &mut merged.body {
            o.response_last_datagram = Some(23);
        }
        let out = vec![
            object(&pairs[0..1], 400, 5000),
            object(&pairs[1..2], 400, 5000),
            merged,
            summary(40),
        ];
        let r = score(&out, &labels(pairs, 40)).unwrap();
        assert_eq!(r.aggregate.match_accuracy, 0.75);
    }

    #[test]
    fn missing_tail_costs_a_tenth() {
        let pairs = vec![pair(0, 6000)];
        let out = vec![object(&pairs, 400, 5400), summary(10)];
        let r = score(&out, &labels(pairs, 10)).unwrap();
        assert!((r.aggregate.response_size_accuracy - 0.9).abs() < 1e-12);
        assert_eq!(r.aggregate.request_size_accuracy, 1.0);
    }

    #[test]
    fn unaligned_pairs_and_spurious_objects() {
        let pairs: Vec<_> = (0..2).map(|i| pair(i, 5000)).collect();
        let mut stray = object(&pairs[1..2], 400, 5000);
        if let Payload::Object(o) = &mut stray.body {
            o.request_first_datagram = 15;
            o.request_last_datagram = 15;
        }
        let out = vec![object(&pairs[0..1], 400, 5000), stray, summary(20)];
        let r = score(&out, &labels(pairs, 20)).unwrap();
        assert_eq!(r.aggregate.match_accuracy, 0.5);
        assert_eq!(r.aggregate.response_size_accuracy, 0.5);
        assert_eq!(r.aggregate.spurious_object_count, 1);
    }

    #[test]
    fn datagram_count_mismatch() {
        let pairs = vec![pair(0, 100)];
        let out = vec![object(&pairs, 400, 100), summary(9)];
        assert!(matches!(score(&out, &labels(pairs, 10)), Err(EvalError::LabelMismatch(_))));
    }

    #[test]
    fn size_accuracy_bounds() {
        assert_eq!(size_accuracy(0, 100), 0.0);
        assert_eq!(size_accuracy(300, 100), 0.0);
        assert_eq!(size_accuracy(100, 100), 1.0);
        assert_eq!(size_accuracy(0, 0), 1.0);
        assert_eq!(size_accuracy(5, 0), 0.0);
    }
}
