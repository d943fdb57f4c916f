//! Scenario execution and report files, shared by the command line and the tests.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{ConfigError, Routing, ScenarioConfig, ScenarioKind, TrainingSection};
use super::experiments::{node_addition_improvement, run_addition_test, run_flow_test, AdditionCase, AdditionError, FlowCase};
use super::generate::{addition_instance, flow_topology, training_topology};
use super::metrics::{emit_csv, emit_plotdata, iteration_series, Aggregate, MetricsReport, Point};
use super::world::{run_training, TrainingRun};
use crate::domain::{NodeId, Topology};
use crate::oracle::{greedy_flows, min_cost_max_flow, optimal_addition, placement_objective, FlowGraph, OracleError};
use crate::protocol::sum_path_cost;
use crate::recovery::RecoveryMode;
use crate::simnet::{NetConfig, RngStreams, SimError};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Addition(#[from] AdditionError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("{path}: {source}")]
    Write { path: String, source: io::Error },
    #[error("{0}")]
    Unsupported(String),
}

/// A scenario argument is either a file or a name under `scenarios/`.
pub fn resolve_scenario(arg: &str) -> PathBuf {
    let direct = PathBuf::from(arg);
    if direct.exists() {
        return direct;
    }
    for dir in ["scenarios", "../scenarios", "../../scenarios"] {
        let p = Path::new(dir).join(format!("{arg}.toml"));
        if p.exists() {
            return p;
        }
    }
    direct
}

pub fn load_scenario(arg: &str) -> Result<ScenarioConfig, RunError> {
    Ok(ScenarioConfig::load(&resolve_scenario(arg))?)
}

/// Command-line overrides of the scenario file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub runs: Option<u32>,
    pub iterations: Option<u32>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ScenarioConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.runs {
            cfg.runs = r;
        }
        if let (Some(i), Some(t)) = (self.iterations, cfg.training.as_mut()) {
            t.iterations = i;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub routing: Routing,
    pub recovery: RecoveryMode,
}

pub fn variant_label(v: Variant) -> &'static str {
    match (v.routing, v.recovery) {
        (Routing::Gwtf, RecoveryMode::Gwtf) => "gwtf",
        (Routing::Gwtf, RecoveryMode::PipelineRestart) => "gwtf-restart",
        (Routing::Greedy, RecoveryMode::Gwtf) => "greedy",
        (Routing::Greedy, RecoveryMode::PipelineRestart) => "greedy-restart",
    }
}

/// All seeded runs of one routing and recovery pairing.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub runs: Vec<(u64, TrainingRun)>,
}

impl Series {
    pub fn failures(&self) -> Vec<(u64, String)> {
        self.runs
            .iter()
            .filter_map(|(s, r)| r.report.failure.clone().map(|f| (*s, f)))
            .collect()
    }

    pub fn summary(&self) -> SeriesSummary {
        let aggs: Vec<Aggregate> = self.runs.iter().map(|(_, r)| r.report.aggregate()).collect();
        let n = aggs.len().max(1) as f64;
        let tpm: Vec<f64> = aggs.iter().filter_map(|a| a.time_per_microbatch).collect();
        SeriesSummary {
            label: self.label.clone(),
            runs: aggs.len() as u32,
            failures: self.failures().len() as u32,
            time_per_microbatch: (!tpm.is_empty()).then(|| tpm.iter().sum::<f64>() / tpm.len() as f64),
            throughput: aggs.iter().map(|a| a.throughput).sum::<f64>() / n,
            wasted_compute: aggs.iter().map(|a| a.wasted_compute).sum::<f64>() / n,
            wasted_fraction: aggs.iter().map(|a| a.wasted_fraction).sum::<f64>() / n,
            communication_time: aggs.iter().map(|a| a.communication_time).sum::<f64>() / n,
            messages: aggs.iter().map(|a| a.messages as f64).sum::<f64>() / n,
            recomputed_stages: aggs.iter().map(|a| f64::from(a.recomputed_stages)).sum::<f64>() / n,
            param_mismatches: aggs.iter().map(|a| a.param_mismatches).sum(),
        }
    }
}

/// Per-run means of one series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesSummary {
    pub label: String,
    pub runs: u32,
    pub failures: u32,
    pub time_per_microbatch: Option<f64>,
    pub throughput: f64,
    pub wasted_compute: f64,
    pub wasted_fraction: f64,
    pub communication_time: f64,
    pub messages: f64,
    pub recomputed_stages: f64,
    pub param_mismatches: u32,
}

pub fn run_series(cfg: &ScenarioConfig, variant: Variant, net: NetConfig) -> Result<Series, RunError> {
    let t = training_of(cfg)?;
    let section = TrainingSection {
        routing: variant.routing,
        recovery: variant.recovery,
        ..t.clone()
    };
    let runs = (0..cfg.runs)
        .map(|r| {
            let seed = cfg.seed.wrapping_add(u64::from(r));
            (seed, run_training(&section, &cfg.protocol, seed, net))
        })
        .collect();
    Ok(Series {
        label: variant_label(variant).to_string(),
        runs,
    })
}

fn training_of(cfg: &ScenarioConfig) -> Result<&TrainingSection, RunError> {
    cfg.training
        .as_ref()
        .ok_or_else(|| RunError::Unsupported(format!("{} has no training section", cfg.name)))
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Flow(Vec<FlowCase>),
    Addition(Vec<AdditionCase>),
    Training(Vec<Series>),
}

impl Outcome {
    /// Human-readable descriptions of every failed run.
    pub fn failures(&self) -> Vec<String> {
        match self {
            Outcome::Flow(cases) => cases
                .iter()
                .filter(|c| c.violations > 0)
                .map(|c| format!("seed {}: {} ledger violations", c.seed, c.violations))
                .collect(),
            Outcome::Addition(_) => Vec::new(),
            Outcome::Training(series) => series
                .iter()
                .flat_map(|s| s.failures().into_iter().map(move |(seed, f)| format!("{} seed {seed}: {f}", s.label)))
                .collect(),
        }
    }
}

/// Runs the scenario as configured. Training scenarios run `variants`, or the
/// configured routing and recovery when none are given.
pub fn run_scenario(cfg: &ScenarioConfig, variants: &[Variant]) -> Result<Outcome, RunError> {
    match cfg.kind {
        ScenarioKind::Flow => {
            let f = cfg.flow.as_ref().ok_or_else(|| RunError::Unsupported("missing flow section".into()))?;
            Ok(Outcome::Flow(run_flow_test(f, &cfg.protocol, cfg.seed, cfg.runs)?))
        }
        ScenarioKind::Addition => {
            let a = cfg
                .addition
                .as_ref()
                .ok_or_else(|| RunError::Unsupported("missing addition section".into()))?;
            Ok(Outcome::Addition(run_addition_test(a, &cfg.protocol, cfg.seed, cfg.runs)?))
        }
        ScenarioKind::Training => {
            let t = training_of(cfg)?;
            let configured = [Variant {
                routing: t.routing,
                recovery: t.recovery,
            }];
            let variants = if variants.is_empty() { &configured[..] } else { variants };
            let series = variants
                .iter()
                .map(|v| run_series(cfg, *v, NetConfig::default()))
                .collect::<Result<_, _>>()?;
            Ok(Outcome::Training(series))
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Short text summary for the terminal.
pub fn summarize(outcome: &Outcome) -> String {
    let mut out = String::new();
    match outcome {
        Outcome::Flow(cases) => {
            let g = mean(cases.iter().map(|c| c.gwtf_cost));
            let b = mean(cases.iter().map(|c| c.greedy_cost));
            let o = mean(cases.iter().map(|c| c.oracle_cost));
            let steady = cases.iter().filter(|c| c.steady_round.is_some()).count();
            out += &format!("runs {}  steady {}/{}\n", cases.len(), steady, cases.len());
            out += &format!("mean sum cost  gwtf {g:.2}  greedy {b:.2}  optimal {o:.2}\n");
            if b > 0.0 {
                out += &format!("reduction vs greedy {:.1}%\n", 100.0 * (b - g) / b);
            }
        }
        Outcome::Addition(cases) => {
            out += &format!("runs {}\n", cases.len());
            let policies: Vec<&String> = cases.first().map(|c| c.after.keys().collect()).unwrap_or_default();
            for p in policies {
                let imp = mean(cases.iter().map(|c| node_addition_improvement(c.before, c.after[p])));
                let after = mean(cases.iter().map(|c| c.after[p]));
                out += &format!("{p:<15} mean cost {after:.3}  improvement {:.1}%\n", 100.0 * imp);
            }
            out += &format!("{:<15} mean cost {:.3}\n", "optimal", mean(cases.iter().map(|c| c.optimal)));
        }
        Outcome::Training(series) => {
            for s in series {
                let m = s.summary();
                let tpm = m.time_per_microbatch.map(|t| format!("{t:.2}")).unwrap_or_else(|| "-".into());
                out += &format!(
                    "{:<15} runs {}  failures {}  time/microbatch {tpm}  throughput {:.2}  wasted {:.1}  recomputed {:.1}\n",
                    m.label, m.runs, m.failures, m.throughput, m.wasted_compute, m.recomputed_stages
                );
            }
        }
    }
    out
}

fn write_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Write {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> RunError + '_ {
    move |e| RunError::Write {
        path: path.display().to_string(),
        source: io::Error::other(e),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(write_err(path))
}

#[derive(Serialize)]
struct FlowRow<'a> {
    seed: u64,
    gwtf_cost: f64,
    greedy_cost: f64,
    oracle_cost: f64,
    gwtf_flows: usize,
    greedy_flows: usize,
    oracle_flows: u32,
    steady_round: Option<u64>,
    rounds: u64,
    messages: u64,
    violations: usize,
    trace_hash: &'a str,
}

#[derive(Serialize)]
struct AdditionRow<'a> {
    seed: u64,
    policy: &'a str,
    before: f64,
    after: f64,
    improvement: f64,
}

/// Writes the outcome's CSV and plot files under `dir/<name>/` and returns their paths.
pub fn write_outputs(name: &str, outcome: &Outcome, dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let dir = dir.join(name);
    fs::create_dir_all(&dir).map_err(write_err(&dir))?;
    let mut written = Vec::new();
    let mut points = Vec::new();
    match outcome {
        Outcome::Flow(cases) => {
            let path = dir.join("flow.csv");
            let rows: Vec<FlowRow> = cases
                .iter()
                .map(|c| FlowRow {
                    seed: c.seed,
                    gwtf_cost: c.gwtf_cost,
                    greedy_cost: c.greedy_cost,
                    oracle_cost: c.oracle_cost,
                    gwtf_flows: c.gwtf_flows,
                    greedy_flows: c.greedy_flows,
                    oracle_flows: c.oracle_flows,
                    steady_round: c.steady_round,
                    rounds: c.rounds,
                    messages: c.messages,
                    violations: c.violations,
                    trace_hash: &c.trace_hash,
                })
                .collect();
            write_rows(&path, &rows)?;
            written.push(path);
            for c in cases {
                for (round, cost) in c.cost_history.iter().enumerate() {
                    points.push(Point {
                        series: format!("cost.seed{}", c.seed),
                        x: (round + 1) as f64,
                        y: *cost,
                    });
                }
            }
        }
        Outcome::Addition(cases) => {
            let path = dir.join("addition.csv");
            let mut rows = Vec::new();
            for c in cases {
                let optimal = ("optimal".to_string(), c.optimal);
                for (policy, after) in c.after.iter().map(|(k, v)| (k.clone(), *v)).chain([optimal]) {
                    let improvement = node_addition_improvement(c.before, after);
                    points.push(Point {
                        series: format!("improvement.{policy}"),
                        x: c.seed as f64,
                        y: improvement,
                    });
                    rows.push((c.seed, policy, c.before, after, improvement));
                }
            }
            let rows: Vec<AdditionRow> = rows
                .iter()
                .map(|(seed, policy, before, after, improvement)| AdditionRow {
                    seed: *seed,
                    policy,
                    before: *before,
                    after: *after,
                    improvement: *improvement,
                })
                .collect();
            write_rows(&path, &rows)?;
            written.push(path);
        }
        Outcome::Training(series) => {
            let reports: Vec<MetricsReport> = series
                .iter()
                .flat_map(|s| {
                    s.runs.iter().map(|(seed, r)| MetricsReport {
                        label: format!("{}.seed{seed}", s.label),
                        ..r.report.clone()
                    })
                })
                .collect();
            let path = dir.join("metrics.csv");
            emit_csv(&reports, &path).map_err(csv_err(&path))?;
            written.push(path);
            let path = dir.join("summary.csv");
            let rows: Vec<SeriesSummary> = series.iter().map(Series::summary).collect();
            write_rows(&path, &rows)?;
            written.push(path);
            points = iteration_series(&reports);
        }
    }
    let path = dir.join("plot.csv");
    emit_plotdata(&points, &path).map_err(csv_err(&path))?;
    written.push(path);
    Ok(written)
}

/// Optimal-flow report for every seeded instance of the scenario.
pub fn oracle_report(cfg: &ScenarioConfig) -> Result<String, RunError> {
    let mut out = String::new();
    for r in 0..cfg.runs {
        let seed = cfg.seed.wrapping_add(u64::from(r));
        let mut rng = RngStreams::new(seed).stream("topology");
        match cfg.kind {
            ScenarioKind::Flow => {
                let f = cfg.flow.as_ref().ok_or_else(|| RunError::Unsupported("missing flow section".into()))?;
                out += &flow_oracle_line(seed, &flow_topology(f, &mut rng));
            }
            ScenarioKind::Training => {
                out += &flow_oracle_line(seed, &training_topology(training_of(cfg)?, &mut rng));
            }
            ScenarioKind::Addition => {
                let a = cfg
                    .addition
                    .as_ref()
                    .ok_or_else(|| RunError::Unsupported("missing addition section".into()))?;
                let inst = addition_instance(a, &mut rng);
                let before = placement_objective(&inst.topology);
                let best = optimal_addition(&inst.topology, &inst.candidates, super::experiments::PLACEMENT_LIMIT)?;
                let placed: Vec<String> = best.assignment.iter().map(|(n, s)| format!("{n}->{s}")).collect();
                out += &format!(
                    "seed {seed}: before {before:.3}  optimal {:.3}  placement [{}]\n",
                    best.objective,
                    placed.join(" ")
                );
            }
        }
    }
    Ok(out)
}

fn flow_oracle_line(seed: u64, t: &Topology) -> String {
    let sol = min_cost_max_flow(&FlowGraph::from_topology(t));
    let greedy = greedy_flows(t);
    let per: BTreeMap<NodeId, u32> = sol.per_origin.clone();
    let per: Vec<String> = per.iter().map(|(o, f)| format!("{o}:{f}")).collect();
    format!(
        "seed {seed}: flow {}  total cost {:.3}  per origin [{}]  greedy {} flows cost {:.3}\n",
        sol.flow,
        sol.total_cost,
        per.join(" "),
        greedy.len(),
        sum_path_cost(&greedy, t)
    )
}

/// Event trace of the scenario's first seed, followed by its hash.
pub fn trace_report(cfg: &ScenarioConfig) -> Result<(String, String), RunError> {
    let net = NetConfig {
        keep_trace: true,
        ..NetConfig::default()
    };
    let streams = RngStreams::new(cfg.seed);
    match cfg.kind {
        ScenarioKind::Flow => {
            let f = cfg.flow.as_ref().ok_or_else(|| RunError::Unsupported("missing flow section".into()))?;
            let t = flow_topology(f, &mut streams.stream("topology"));
            let formed = crate::protocol::run_formation(&t, &super::experiments::formation_config(&cfg.protocol), net, &streams)?;
            Ok((formed.trace.unwrap_or_default(), formed.trace_hash))
        }
        ScenarioKind::Training => {
            let run = run_training(training_of(cfg)?, &cfg.protocol, cfg.seed, net);
            Ok((run.trace.unwrap_or_default(), run.trace_hash))
        }
        ScenarioKind::Addition => Err(RunError::Unsupported(
            "addition scenarios have no event trace; use run or oracle".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenarios_dir() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
    }

    #[test]
    fn every_canned_scenario_loads() {
        let mut names = Vec::new();
        for entry in fs::read_dir(scenarios_dir()).unwrap() {
            let path = entry.unwrap().path();
            let cfg = ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(Some(cfg.name.as_str()), path.file_stem().and_then(|s| s.to_str()));
            names.push(cfg.name);
        }
        names.sort();
        assert_eq!(names.len(), 17);
        assert!(names.contains(&"heterogeneous-20".to_string()));
    }

    #[test]
    fn overrides_replace_seed_runs_and_iterations() {
        let mut cfg = ScenarioConfig::load(&scenarios_dir().join("homogeneous-10.toml")).unwrap();
        Overrides {
            seed: Some(9),
            runs: Some(2),
            iterations: Some(3),
        }
        .apply(&mut cfg);
        assert_eq!((cfg.seed, cfg.runs, cfg.training.as_ref().unwrap().iterations), (9, 2, 3));
    }

    #[test]
    fn training_outputs_have_one_row_per_iteration() {
        let mut cfg = ScenarioConfig::load(&scenarios_dir().join("heterogeneous-10.toml")).unwrap();
        Overrides {
            seed: None,
            runs: Some(2),
            iterations: Some(4),
        }
        .apply(&mut cfg);
        let variants = [
            Variant { routing: Routing::Gwtf, recovery: RecoveryMode::Gwtf },
            Variant { routing: Routing::Greedy, recovery: RecoveryMode::Gwtf },
        ];
        let outcome = run_scenario(&cfg, &variants).unwrap();
        assert!(outcome.failures().is_empty());
        let dir = tempfile::tempdir().unwrap();
        let files = write_outputs(&cfg.name, &outcome, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let metrics = fs::read_to_string(&files[0]).unwrap();
        // Version, header, then 4 iterations and a total for each of 2 seeds x 2 variants.
        assert_eq!(metrics.lines().count(), 2 + 4 * 5);
        assert!(metrics.lines().any(|l| l.starts_with("greedy.seed2,all,")));
        let summary = fs::read_to_string(&files[1]).unwrap();
        assert_eq!(summary.lines().count(), 3);
    }

    #[test]
    fn flow_outputs_and_summary() {
        let mut cfg = ScenarioConfig::load(&scenarios_dir().join("flow-1.toml")).unwrap();
        cfg.runs = 2;
        let outcome = run_scenario(&cfg, &[]).unwrap();
        let text = summarize(&outcome);
        assert!(text.starts_with("runs 2"));
        let dir = tempfile::tempdir().unwrap();
        let files = write_outputs(&cfg.name, &outcome, dir.path()).unwrap();
        let flow = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(flow.lines().count(), 3);
        let plot = fs::read_to_string(&files[1]).unwrap();
        assert!(plot.lines().nth(1).unwrap().starts_with("cost.seed"));
    }

    #[test]
    fn addition_has_no_trace() {
        let cfg = ScenarioConfig::load(&scenarios_dir().join("addition-1.toml")).unwrap();
        assert!(matches!(trace_report(&cfg), Err(RunError::Unsupported(_))));
    }

    #[test]
    fn resolve_falls_back_to_given_path() {
        assert_eq!(resolve_scenario("no-such-scenario"), PathBuf::from("no-such-scenario"));
        assert!(matches!(load_scenario("no-such-scenario"), Err(RunError::Config(ConfigError::Io { .. }))));
    }
}
