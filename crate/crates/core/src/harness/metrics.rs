//! Run records and the metrics derived from them.
//!
//! The training world appends [`Record`]s as it runs; every metric is a pure function
//! of that log, so hand-built logs can check the arithmetic.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::NodeId;

pub const CSV_VERSION: &str = "# gwtf-metrics v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pass {
    Forward,
    /// Last-stage forward and backward at the data node.
    Turnaround,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Completed,
    Deferred,
    Abandoned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryKind {
    Timeout,
    Reroute,
    Deny,
    Repair,
    Restart,
    Crash,
    Rejoin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Record {
    Start {
        iteration: u32,
        time: f64,
    },
    Emitted {
        iteration: u32,
        batch: u64,
    },
    Compute {
        iteration: u32,
        batch: u64,
        node: NodeId,
        pass: Pass,
        duration: f64,
        /// Relay forward work redone because of a backward-pass failure.
        recompute: bool,
    },
    Payload {
        iteration: u32,
        batch: u64,
        from: NodeId,
        to: NodeId,
        transit: f64,
    },
    Finished {
        iteration: u32,
        batch: u64,
        outcome: Outcome,
        /// Final route `[data, relay.., data]`; empty when the batch never left its source.
        path: Vec<NodeId>,
    },
    /// A data node applied this iteration's parameter update.
    Update {
        iteration: u32,
        node: NodeId,
        time: f64,
    },
    Recovery {
        iteration: u32,
        kind: RecoveryKind,
    },
    ParamMismatch {
        iteration: u32,
    },
    Messages {
        iteration: u32,
        count: u64,
    },
}

impl Record {
    pub fn iteration(&self) -> u32 {
        match self {
            Record::Start { iteration, .. }
            | Record::Emitted { iteration, .. }
            | Record::Compute { iteration, .. }
            | Record::Payload { iteration, .. }
            | Record::Finished { iteration, .. }
            | Record::Update { iteration, .. }
            | Record::Recovery { iteration, .. }
            | Record::ParamMismatch { iteration }
            | Record::Messages { iteration, .. } => *iteration,
        }
    }
}

/// Iteration lengths: the gap between the slowest data node's consecutive updates, the
/// first one measured from the run start.
pub fn iteration_durations(records: &[Record]) -> BTreeMap<u32, f64> {
    let mut last_update: BTreeMap<u32, f64> = BTreeMap::new();
    let mut start = None;
    for r in records {
        match r {
            Record::Start { time, .. } if start.is_none() => start = Some(*time),
            Record::Update { iteration, time, .. } => {
                let e = last_update.entry(*iteration).or_insert(*time);
                *e = e.max(*time);
            }
            _ => {}
        }
    }
    let mut prev = start.unwrap_or(0.0);
    let mut out = BTreeMap::new();
    for (it, t) in last_update {
        out.insert(it, t - prev);
        prev = t;
    }
    out
}

pub fn completed(records: &[Record], iteration: u32) -> usize {
    records
        .iter()
        .filter(|r| matches!(r, Record::Finished { iteration: i, outcome: Outcome::Completed, .. } if *i == iteration))
        .count()
}

/// Iteration duration over the microbatches aggregated in it; absent when none were.
pub fn time_per_microbatch(records: &[Record], iteration: u32) -> Option<f64> {
    let n = completed(records, iteration);
    if n == 0 {
        return None;
    }
    iteration_durations(records).get(&iteration).map(|d| d / n as f64)
}

type BatchKey = (u32, u64);

fn finished(records: &[Record]) -> BTreeMap<BatchKey, (Outcome, &[NodeId])> {
    records
        .iter()
        .filter_map(|r| match r {
            Record::Finished { iteration, batch, outcome, path } => Some(((*iteration, *batch), (*outcome, path.as_slice()))),
            _ => None,
        })
        .collect()
}

/// Compute spent on work that did not end up in an aggregated gradient: everything for
/// deferred or abandoned microbatches, and for completed ones any work at nodes off the
/// final path or repeated at a node for the same pass.
pub fn wasted_compute(records: &[Record], iteration: Option<u32>) -> f64 {
    let ends = finished(records);
    let mut used: BTreeSet<(BatchKey, NodeId, Pass)> = BTreeSet::new();
    let mut wasted = 0.0;
    for r in records {
        if let Record::Compute { iteration: it, batch, node, pass, duration, .. } = r {
            if iteration.is_some_and(|i| i != *it) {
                continue;
            }
            let key = (*it, *batch);
            let useful = match ends.get(&key) {
                Some((Outcome::Completed, path)) => path.contains(node) && used.insert((key, *node, *pass)),
                _ => false,
            };
            if !useful {
                wasted += duration;
            }
        }
    }
    wasted
}

pub fn compute_time(records: &[Record], iteration: Option<u32>) -> f64 {
    records
        .iter()
        .filter_map(|r| match r {
            Record::Compute { iteration: it, duration, .. } if iteration.is_none_or(|i| i == *it) => Some(*duration),
            _ => None,
        })
        .sum()
}

/// Link time of the activations and gradients that travelled the final path of each
/// completed microbatch, each hop and direction counted once.
pub fn communication_time(records: &[Record], iteration: Option<u32>) -> f64 {
    let ends = finished(records);
    let mut hops: BTreeMap<(BatchKey, NodeId, NodeId), f64> = BTreeMap::new();
    for r in records {
        if let Record::Payload { iteration: it, batch, from, to, transit } = r {
            if iteration.is_none_or(|i| i == *it) {
                hops.insert(((*it, *batch), *from, *to), *transit);
            }
        }
    }
    let mut total = 0.0;
    for (key, (outcome, path)) in &ends {
        if *outcome != Outcome::Completed || iteration.is_some_and(|i| i != key.0) {
            continue;
        }
        for w in path.windows(2) {
            total += hops.get(&(*key, w[0], w[1])).copied().unwrap_or(0.0);
            total += hops.get(&(*key, w[1], w[0])).copied().unwrap_or(0.0);
        }
    }
    total
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u32,
    pub duration: f64,
    pub emitted: u32,
    pub completed: u32,
    pub deferred: u32,
    pub abandoned: u32,
    pub time_per_microbatch: Option<f64>,
    pub compute_time: f64,
    pub wasted_compute: f64,
    pub communication_time: f64,
    pub messages: u64,
    pub recovery: BTreeMap<RecoveryKind, u32>,
    pub recomputed_stages: u32,
    pub param_mismatches: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub iterations: Vec<IterationMetrics>,
    /// Set when the run stopped early, e.g. on an irreparable path.
    pub failure: Option<String>,
}

impl MetricsReport {
    pub fn from_records(label: &str, records: &[Record]) -> Self {
        let durations = iteration_durations(records);
        let mut by_it: BTreeMap<u32, IterationMetrics> = BTreeMap::new();
        for r in records {
            let m = by_it.entry(r.iteration()).or_insert_with(|| IterationMetrics {
                iteration: r.iteration(),
                ..IterationMetrics::default()
            });
            match r {
                Record::Emitted { .. } => m.emitted += 1,
                Record::Finished { outcome, .. } => match outcome {
                    Outcome::Completed => m.completed += 1,
                    Outcome::Deferred => m.deferred += 1,
                    Outcome::Abandoned => m.abandoned += 1,
                },
                Record::Compute { recompute: true, .. } => m.recomputed_stages += 1,
                Record::Recovery { kind, .. } => *m.recovery.entry(*kind).or_insert(0) += 1,
                Record::ParamMismatch { .. } => m.param_mismatches += 1,
                Record::Messages { count, .. } => m.messages += count,
                _ => {}
            }
        }
        for m in by_it.values_mut() {
            m.duration = durations.get(&m.iteration).copied().unwrap_or(0.0);
            m.time_per_microbatch = time_per_microbatch(records, m.iteration);
            m.compute_time = compute_time(records, Some(m.iteration));
            m.wasted_compute = wasted_compute(records, Some(m.iteration));
            m.communication_time = communication_time(records, Some(m.iteration));
        }
        MetricsReport {
            label: label.to_string(),
            iterations: by_it.into_values().collect(),
            failure: None,
        }
    }

    pub fn aggregate(&self) -> Aggregate {
        let n = self.iterations.len();
        let tpm: Vec<f64> = self.iterations.iter().filter_map(|m| m.time_per_microbatch).collect();
        let compute: f64 = self.iterations.iter().map(|m| m.compute_time).sum();
        let wasted: f64 = self.iterations.iter().map(|m| m.wasted_compute).sum();
        let mut recovery = BTreeMap::new();
        for m in &self.iterations {
            for (k, v) in &m.recovery {
                *recovery.entry(*k).or_insert(0) += v;
            }
        }
        Aggregate {
            iterations: n as u32,
            time_per_microbatch: (!tpm.is_empty()).then(|| tpm.iter().sum::<f64>() / tpm.len() as f64),
            throughput: if n == 0 {
                0.0
            } else {
                self.iterations.iter().map(|m| f64::from(m.completed)).sum::<f64>() / n as f64
            },
            emitted: self.iterations.iter().map(|m| m.emitted).sum(),
            completed: self.iterations.iter().map(|m| m.completed).sum(),
            deferred: self.iterations.iter().map(|m| m.deferred).sum(),
            abandoned: self.iterations.iter().map(|m| m.abandoned).sum(),
            compute_time: compute,
            wasted_compute: wasted,
            wasted_fraction: if compute > 0.0 { wasted / compute } else { 0.0 },
            communication_time: self.iterations.iter().map(|m| m.communication_time).sum(),
            messages: self.iterations.iter().map(|m| m.messages).sum(),
            recovery,
            recomputed_stages: self.iterations.iter().map(|m| m.recomputed_stages).sum(),
            param_mismatches: self.iterations.iter().map(|m| m.param_mismatches).sum(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub iterations: u32,
    /// Mean over iterations that completed at least one microbatch.
    pub time_per_microbatch: Option<f64>,
    /// Mean completed microbatches per iteration.
    pub throughput: f64,
    pub emitted: u32,
    pub completed: u32,
    pub deferred: u32,
    pub abandoned: u32,
    pub compute_time: f64,
    pub wasted_compute: f64,
    pub wasted_fraction: f64,
    pub communication_time: f64,
    pub messages: u64,
    pub recovery: BTreeMap<RecoveryKind, u32>,
    pub recomputed_stages: u32,
    pub param_mismatches: u32,
}

pub const CSV_COLUMNS: [&str; 18] = [
    "label",
    "iteration",
    "duration",
    "emitted",
    "completed",
    "deferred",
    "abandoned",
    "time_per_microbatch",
    "compute_time",
    "wasted_compute",
    "communication_time",
    "messages",
    "timeouts",
    "reroutes",
    "denies",
    "repairs",
    "restarts",
    "recomputed_stages",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn count(m: &BTreeMap<RecoveryKind, u32>, k: RecoveryKind) -> String {
    m.get(&k).copied().unwrap_or(0).to_string()
}

fn row(label: &str, it: &str, duration: f64, m: &Aggregate) -> Vec<String> {
    vec![
        label.to_string(),
        it.to_string(),
        duration.to_string(),
        m.emitted.to_string(),
        m.completed.to_string(),
        m.deferred.to_string(),
        m.abandoned.to_string(),
        opt(m.time_per_microbatch),
        m.compute_time.to_string(),
        m.wasted_compute.to_string(),
        m.communication_time.to_string(),
        m.messages.to_string(),
        count(&m.recovery, RecoveryKind::Timeout),
        count(&m.recovery, RecoveryKind::Reroute),
        count(&m.recovery, RecoveryKind::Deny),
        count(&m.recovery, RecoveryKind::Repair),
        count(&m.recovery, RecoveryKind::Restart),
        m.recomputed_stages.to_string(),
    ]
}

/// Version line, column header, one row per iteration and, when there are iterations,
/// an `all` row with run totals (time per microbatch is the per-iteration mean).
pub fn write_csv(reports: &[MetricsReport], out: impl Write) -> csv::Result<()> {
    let mut out = out;
    writeln!(out, "{CSV_VERSION}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in reports {
        for m in &r.iterations {
            let one = Aggregate {
                emitted: m.emitted,
                completed: m.completed,
                deferred: m.deferred,
                abandoned: m.abandoned,
                time_per_microbatch: m.time_per_microbatch,
                compute_time: m.compute_time,
                wasted_compute: m.wasted_compute,
                communication_time: m.communication_time,
                messages: m.messages,
                recovery: m.recovery.clone(),
                recomputed_stages: m.recomputed_stages,
                ..Aggregate::default()
            };
            w.write_record(row(&r.label, &m.iteration.to_string(), m.duration, &one))?;
        }
        if !r.iterations.is_empty() {
            let total: f64 = r.iterations.iter().map(|m| m.duration).sum();
            w.write_record(row(&r.label, "all", total, &r.aggregate()))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(reports: &[MetricsReport], path: &Path) -> csv::Result<()> {
    write_csv(reports, std::fs::File::create(path)?)
}

/// One point of a plot-ready series, written in long format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub series: String,
    pub x: f64,
    pub y: f64,
}

/// Per-iteration series of each report, named `<metric>.<label>`.
pub fn iteration_series(reports: &[MetricsReport]) -> Vec<Point> {
    let mut out = Vec::new();
    for r in reports {
        for m in &r.iterations {
            let x = f64::from(m.iteration);
            if let Some(t) = m.time_per_microbatch {
                out.push(Point { series: format!("time_per_microbatch.{}", r.label), x, y: t });
            }
            out.push(Point { series: format!("throughput.{}", r.label), x, y: f64::from(m.completed) });
            out.push(Point { series: format!("wasted_compute.{}", r.label), x, y: m.wasted_compute });
        }
    }
    out
}

pub fn emit_plotdata(points: &[Point], path: &Path) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    fn compute(batch: u64, node: u32, pass: Pass, duration: f64) -> Record {
        Record::Compute {
            iteration: 0,
            batch,
            node: n(node),
            pass,
            duration,
            recompute: false,
        }
    }

    #[test]
    fn three_event_trace() {
        let records = vec![
            Record::Start { iteration: 0, time: 1.0 },
            Record::Update { iteration: 0, node: n(0), time: 3.0 },
            Record::Update { iteration: 0, node: n(1), time: 4.0 },
        ];
        assert_eq!(iteration_durations(&records)[&0], 3.0);
        assert_eq!(time_per_microbatch(&records, 0), None);
        let mut with_work = records.clone();
        for b in 0..6 {
            with_work.push(Record::Finished { iteration: 0, batch: b, outcome: Outcome::Completed, path: vec![] });
        }
        assert_eq!(time_per_microbatch(&with_work, 0), Some(0.5));
    }

    #[test]
    fn deferred_work_is_wasted() {
        let records = vec![
            compute(1, 5, Pass::Forward, 4.0),
            compute(1, 6, Pass::Forward, 4.0),
            Record::Finished { iteration: 0, batch: 1, outcome: Outcome::Deferred, path: vec![] },
        ];
        assert_eq!(wasted_compute(&records, None), 8.0);
    }

    #[test]
    fn repeated_and_off_path_work_is_wasted() {
        let path = vec![n(0), n(5), n(6), n(0)];
        let mut records = vec![
            compute(1, 0, Pass::Forward, 1.0),
            compute(1, 5, Pass::Forward, 2.0),
            compute(1, 7, Pass::Forward, 3.0),
            compute(1, 6, Pass::Forward, 3.0),
            compute(1, 0, Pass::Turnaround, 1.0),
            compute(1, 6, Pass::Backward, 3.0),
            compute(1, 5, Pass::Backward, 2.0),
            compute(1, 0, Pass::Backward, 1.0),
        ];
        records.push(Record::Finished { iteration: 0, batch: 1, outcome: Outcome::Completed, path: path.clone() });
        assert_eq!(wasted_compute(&records, None), 3.0);
        // A full restart repeats one forward pass at every node.
        records.push(compute(1, 0, Pass::Forward, 1.0));
        records.push(compute(1, 5, Pass::Forward, 2.0));
        records.push(compute(1, 6, Pass::Forward, 3.0));
        assert_eq!(wasted_compute(&records, None), 9.0);
        assert_eq!(compute_time(&records, None), 22.0);
    }

    #[test]
    fn communication_counts_final_hops_once() {
        let mut records = Vec::new();
        for (f, t, x) in [(0, 5, 1.0), (5, 6, 2.0), (5, 7, 9.0), (6, 0, 3.0), (0, 6, 3.0), (6, 5, 2.0), (5, 0, 1.0)] {
            records.push(Record::Payload { iteration: 0, batch: 2, from: n(f), to: n(t), transit: x });
        }
        records.push(Record::Finished { iteration: 0, batch: 2, outcome: Outcome::Completed, path: vec![n(0), n(5), n(6), n(0)] });
        assert_eq!(communication_time(&records, None), 12.0);
    }

    #[test]
    fn csv_shapes() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(CSV_VERSION));

        let mut records = Vec::new();
        for it in 0..25 {
            records.push(Record::Start { iteration: it, time: f64::from(it) });
            records.push(Record::Update { iteration: it, node: n(0), time: f64::from(it + 1) });
        }
        let report = MetricsReport::from_records("gwtf", &records);
        let mut buf = Vec::new();
        write_csv(&[report], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2 + 25 + 1);
        assert!(text.lines().last().unwrap().starts_with("gwtf,all,25,"));
    }

    #[test]
    fn series_names_carry_labels() {
        let records = vec![
            Record::Start { iteration: 0, time: 0.0 },
            Record::Update { iteration: 0, node: n(0), time: 2.0 },
            Record::Finished { iteration: 0, batch: 0, outcome: Outcome::Completed, path: vec![] },
        ];
        let a = MetricsReport::from_records("gwtf", &records);
        let b = MetricsReport::from_records("greedy", &records);
        let names: BTreeSet<String> = iteration_series(&[a, b]).into_iter().map(|p| p.series).collect();
        assert!(names.contains("time_per_microbatch.gwtf"));
        assert!(names.contains("time_per_microbatch.greedy"));
    }
}
