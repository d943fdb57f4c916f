//! Exit criteria. Every test writes one `criterion N: PASS|FAIL` line to stderr,
//! uncaptured, so the verdicts show up in plain `cargo test` output.

mod determinism;
mod invariants;
mod oracle;
mod recovery;

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;

use gwtf::harness::experiments::{node_addition_improvement, run_addition_test, run_flow_test, FlowCase};
use gwtf::harness::runner::{run_series, Variant};
use gwtf::harness::{Dist, Routing, ScenarioConfig};
use gwtf::recovery::RecoveryMode;
use gwtf::simnet::NetConfig;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"))
}

pub fn scenario(name: &str) -> ScenarioConfig {
    ScenarioConfig::load(&scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn verdict(n: u32, ok: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(ok, "{line}");
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

const MIN_FLOW_SEEDS: u32 = 10;

fn flow_settings() -> &'static Vec<(String, Vec<FlowCase>)> {
    static CASES: OnceLock<Vec<(String, Vec<FlowCase>)>> = OnceLock::new();
    CASES.get_or_init(|| {
        (1..=6)
            .map(|i| {
                let name = format!("flow-{i}");
                let cfg = scenario(&name);
                assert!(cfg.runs >= MIN_FLOW_SEEDS);
                let f = cfg.flow.as_ref().expect("flow section");
                (name, run_flow_test(f, &cfg.protocol, cfg.seed, cfg.runs).expect("flow run"))
            })
            .collect()
    })
}

#[test]
fn criterion_1_flow_quality_vs_greedy() {
    let mut directional = true;
    let mut best = f64::NEG_INFINITY;
    let mut parts = Vec::new();
    for (name, cases) in flow_settings() {
        let g = mean(cases.iter().map(|c| c.gwtf_cost));
        let b = mean(cases.iter().map(|c| c.greedy_cost));
        directional &= g <= b;
        let reduction = (b - g) / b;
        best = best.max(reduction);
        parts.push(format!("{name} {:.1}%", 100.0 * reduction));
    }
    let ok = directional && best >= 0.20;
    verdict(
        1,
        ok,
        &format!(
            "gwtf <= greedy on every setting: {directional}; best reduction {:.1}% (need >= 20%) [{}]",
            100.0 * best,
            parts.join(", ")
        ),
    );
}

#[test]
fn criterion_2_flow_quality_vs_oracle() {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, cases) in &flow_settings()[..4] {
        let within = cases.iter().filter(|c| c.gwtf_cost <= 1.5 * c.oracle_cost).count();
        let frac = within as f64 / cases.len() as f64;
        ok &= frac >= 0.8;
        parts.push(format!("{name} {within}/{}", cases.len()));
    }
    verdict(2, ok, &format!("seeds within 1.5x of optimal (need >= 80%): {}", parts.join(", ")));
}

#[test]
fn criterion_3_steady_state_speed() {
    let mut worst = 0;
    let mut missing = 0;
    for (_, cases) in flow_settings() {
        for c in cases {
            match c.steady_round {
                Some(r) => worst = worst.max(r + 1),
                None => missing += 1,
            }
        }
    }
    let ok = missing == 0 && worst <= 120;
    verdict(3, ok, &format!("slowest steady state {worst} rounds (limit 120), {missing} runs never steady"));
}

#[test]
fn criterion_4_node_addition() {
    let mut ok = true;
    let mut parts = Vec::new();
    for i in 1..=5 {
        let name = format!("addition-{i}");
        let cfg = scenario(&name);
        assert!(cfg.runs >= 10);
        let a = cfg.addition.as_ref().expect("addition section");
        assert_eq!(a.stages, 4);
        assert!(a.candidates <= 6);
        let cases = run_addition_test(a, &cfg.protocol, cfg.seed, cfg.runs).expect("addition run");
        let imp = |p: &str| mean(cases.iter().map(|c| node_addition_improvement(c.before, c.after[p])));
        let (g, cf, r) = (imp("gwtf"), imp("capacity-first"), imp("random"));
        let ratio = mean(cases.iter().map(|c| c.after["gwtf"] / c.optimal));
        let pass = g >= cf && g >= r && ratio <= 1.25;
        ok &= pass;
        parts.push(format!(
            "{name} gwtf {:.1}% cap-first {:.1}% random {:.1}% vs-optimal {ratio:.3}",
            100.0 * g,
            100.0 * cf,
            100.0 * r
        ));
    }
    verdict(4, ok, &parts.join("; "));
}

#[test]
fn criterion_5_churn_tolerance() {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["heterogeneous-10", "heterogeneous-20"] {
        let cfg = scenario(name);
        let t = cfg.training.as_ref().expect("training section");
        assert_eq!(t.relays + t.data_nodes, 18);
        assert_eq!(t.stages + 1, 6);
        assert_eq!(t.data_nodes, 2);
        assert_eq!(t.capacity.bounds(), (1.0, 3.0));
        assert!(matches!(t.capacity, Dist::FloorUniform { .. }));
        assert_eq!(cfg.runs, 25);
        let run = |recovery| {
            let v = Variant {
                routing: Routing::Gwtf,
                recovery,
            };
            run_series(&cfg, v, NetConfig::default()).expect("series").summary()
        };
        let g = run(RecoveryMode::Gwtf);
        let s = run(RecoveryMode::PipelineRestart);
        let (gt, st) = (g.time_per_microbatch.unwrap_or(f64::INFINITY), s.time_per_microbatch.unwrap_or(f64::INFINITY));
        let pass = g.failures == 0 && s.failures == 0 && gt <= st && g.wasted_compute < s.wasted_compute;
        ok &= pass;
        parts.push(format!(
            "{name}: time/microbatch {gt:.1} vs {st:.1}, wasted {:.1} vs {:.1}",
            g.wasted_compute, s.wasted_compute
        ));
    }
    verdict(5, ok, &parts.join("; "));
}

#[test]
fn criterion_6_crash_free_parity() {
    let cfg = scenario("homogeneous-0");
    let t = cfg.training.as_ref().expect("training section");
    assert_eq!(t.churn, 0.0);
    let full = t.data_nodes * t.microbatches;
    let series = run_series(
        &cfg,
        Variant {
            routing: Routing::Gwtf,
            recovery: RecoveryMode::Gwtf,
        },
        NetConfig::default(),
    )
    .expect("series");
    let short: Vec<u64> = series
        .runs
        .iter()
        .filter(|(_, r)| r.report.failure.is_some() || r.report.iterations.iter().any(|m| m.completed != full))
        .map(|(s, _)| *s)
        .collect();
    let ok = short.is_empty() && series.runs.len() == 25;
    verdict(
        6,
        ok,
        &format!("{} seeds, {full} microbatches every iteration; short seeds {short:?}", series.runs.len()),
    );
}
