use std::collections::BTreeMap;

use gwtf::domain::{NodeId, StageId};
use gwtf::harness::metrics::{Pass, Record};
use gwtf::harness::world::{batch_id, run_training_scripted, ScriptedCrash};
use gwtf::recovery::RecoveryMode;
use gwtf::simnet::NetConfig;

use super::{scenario, verdict};

/// Recomputed relay forward steps per microbatch.
fn recomputes(records: &[Record]) -> BTreeMap<u64, u32> {
    let mut out = BTreeMap::new();
    for r in records {
        if let Record::Compute {
            batch,
            pass: Pass::Forward,
            recompute: true,
            ..
        } = r
        {
            *out.entry(*batch).or_insert(0) += 1;
        }
    }
    out
}

fn completed(records: &[Record], batch: u64) -> bool {
    records.iter().any(|r| {
        matches!(r, Record::Finished { batch: b, outcome: gwtf::harness::metrics::Outcome::Completed, .. } if *b == batch)
    })
}

#[test]
fn criterion_10_recovery_cost_bound() {
    let cfg = scenario("homogeneous-0");
    let mut t = cfg.training.clone().expect("training section");
    t.iterations = 1;
    let stages = t.stages;
    let mut bad = Vec::new();
    let mut cases = 0;
    for mode in [RecoveryMode::Gwtf, RecoveryMode::PipelineRestart] {
        t.recovery = mode;
        let expected = match mode {
            RecoveryMode::Gwtf => 1,
            RecoveryMode::PipelineRestart => stages,
        };
        for seed in 1..=10u64 {
            for stage in 0..stages {
                cases += 1;
                let crash = ScriptedCrash {
                    batch: batch_id(0, NodeId(0), 0),
                    stage: StageId(stage),
                };
                let run = run_training_scripted(&t, &cfg.protocol, seed, NetConfig::default(), &[crash]);
                let counts = recomputes(&run.records);
                // The crashed relay may have carried other microbatches too; each one
                // pays the same bound.
                let ok = counts.get(&crash.batch) == Some(&expected)
                    && counts.values().all(|&c| c == expected)
                    && completed(&run.records, crash.batch)
                    && run.report.failure.is_none();
                if !ok {
                    bad.push(format!("{mode:?} seed {seed} stage {stage}: {counts:?}"));
                }
            }
        }
    }
    verdict(
        10,
        bad.is_empty(),
        &format!(
            "{cases} scripted backward crashes, {stages}-stage paths: 1 recomputed stage per microbatch with repair, {stages} with restart; mismatches {bad:?}"
        ),
    );
}
