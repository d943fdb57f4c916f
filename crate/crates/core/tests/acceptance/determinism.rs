use std::process::Command;

use gwtf::harness::runner::trace_report;

use super::{scenario, scenario_path, verdict};

/// Trace hashes of the first seed of `flow-1` and of three iterations of
/// `heterogeneous-20`, recorded from an earlier build.
const GOLDEN_FLOW: &str = "36bf6b5244f33f923a6e7900749bcd3bf9c1279cf07d2dffab5114851f7d84ce";
const GOLDEN_CHURN: &str = "fa3a832d2f47a4a6f2db715f04ecddf11557c90fee06a7199af73f9811d5cbea";

fn in_process(name: &str, iterations: Option<u32>) -> (String, String) {
    let mut cfg = scenario(name);
    if let (Some(i), Some(t)) = (iterations, cfg.training.as_mut()) {
        t.iterations = i;
    }
    trace_report(&cfg).expect("trace")
}

fn subprocess(name: &str, iterations: Option<u32>) -> String {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gwtf"));
    cmd.arg("trace").arg(scenario_path(name));
    if let Some(i) = iterations {
        cmd.arg("--iterations").arg(i.to_string());
    }
    let out = cmd.output().expect("spawn gwtf");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).expect("utf-8");
    text.lines()
        .rev()
        .find_map(|l| l.strip_prefix("trace-hash "))
        .expect("hash line")
        .to_string()
}

#[test]
fn criterion_9_determinism() {
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, iterations, golden) in [("flow-1", None, GOLDEN_FLOW), ("heterogeneous-20", Some(3), GOLDEN_CHURN)] {
        let (lines_a, a) = in_process(name, iterations);
        let (lines_b, b) = in_process(name, iterations);
        let c = subprocess(name, iterations);
        let d = subprocess(name, iterations);
        let same = a == b && lines_a == lines_b && a == c && c == d && !lines_a.is_empty();
        let pinned = a == golden;
        ok &= same && pinned;
        notes.push(format!("{name} {}", &a[..12]));
        if !pinned {
            notes.push(format!("{name} expected golden {golden} got {a}"));
        }
    }
    // A different seed must change the trace.
    let mut cfg = scenario("flow-1");
    cfg.seed += 1;
    let other = trace_report(&cfg).expect("trace").1;
    ok &= other != in_process("flow-1", None).1;
    verdict(9, ok, &format!("two runs in-process and two subprocesses agree: {}", notes.join(", ")));
}
