use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gwtf::harness::runner::{
    load_scenario, oracle_report, run_scenario, summarize, trace_report, write_outputs, Outcome, Overrides, Variant,
};
use gwtf::harness::{Routing, ScenarioKind};
use gwtf::recovery::RecoveryMode;

#[derive(Parser)]
#[command(name = "gwtf", version, about = "Simulate decentralized pipeline training under churn")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file, or the name of a file in scenarios/.
    scenario: String,
    /// First seed; further runs use the following seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeded runs.
    #[arg(long)]
    runs: Option<u32>,
    /// Training iterations per run.
    #[arg(long)]
    iterations: Option<u32>,
    #[arg(long, env = "GWTF_OUT_DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write CSV and plot data.
    Run(Common),
    /// Run a training scenario once per routing and recovery pairing.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "gwtf,greedy")]
        routing: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        recovery: Vec<String>,
    },
    /// Print the optimal flow or placement of each seeded instance.
    Oracle {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<u32>,
    },
    /// Print the event trace of one seeded run.
    Trace {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<u32>,
    },
}

fn parse_routing(s: &str) -> Result<Routing> {
    match s.trim() {
        "gwtf" => Ok(Routing::Gwtf),
        "greedy" => Ok(Routing::Greedy),
        other => bail!("unknown routing {other:?} (expected gwtf or greedy)"),
    }
}

fn parse_recovery(s: &str) -> Result<RecoveryMode> {
    match s.trim() {
        "gwtf" => Ok(RecoveryMode::Gwtf),
        "pipeline-restart" | "restart" => Ok(RecoveryMode::PipelineRestart),
        other => bail!("unknown recovery {other:?} (expected gwtf or pipeline-restart)"),
    }
}

fn execute(common: &Common, variants: &[Variant]) -> Result<bool> {
    let mut cfg = load_scenario(&common.scenario)?;
    Overrides {
        seed: common.seed,
        runs: common.runs,
        iterations: common.iterations,
    }
    .apply(&mut cfg);
    let outcome = run_scenario(&cfg, variants)?;
    print!("{}", summarize(&outcome));
    let files = write_outputs(&cfg.name, &outcome, &common.out)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(report_failures(&outcome))
}

fn report_failures(outcome: &Outcome) -> bool {
    let failures = outcome.failures();
    for f in &failures {
        eprintln!("failed run: {f}");
    }
    failures.is_empty()
}

fn compare(common: &Common, routing: &[String], recovery: &[String]) -> Result<bool> {
    let cfg = load_scenario(&common.scenario)?;
    if cfg.kind != ScenarioKind::Training {
        // Flow runs already score gwtf against greedy and the optimum.
        return execute(common, &[]);
    }
    let routes = routing.iter().map(|r| parse_routing(r)).collect::<Result<Vec<_>>>()?;
    let recoveries = if recovery.is_empty() {
        vec![cfg.training.as_ref().map(|t| t.recovery).unwrap_or_default()]
    } else {
        recovery.iter().map(|r| parse_recovery(r)).collect::<Result<Vec<_>>>()?
    };
    let variants: Vec<Variant> = routes
        .iter()
        .flat_map(|&routing| recoveries.iter().map(move |&recovery| Variant { routing, recovery }))
        .collect();
    execute(common, &variants)
}

fn trace(scenario: &str, seed: Option<u64>, iterations: Option<u32>) -> Result<()> {
    let mut cfg = load_scenario(scenario)?;
    Overrides {
        seed,
        runs: None,
        iterations,
    }
    .apply(&mut cfg);
    let (lines, hash) = trace_report(&cfg)?;
    print!("{lines}");
    println!("trace-hash {hash}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => execute(c, &[]),
        Command::Compare {
            common,
            routing,
            recovery,
        } => compare(common, routing, recovery),
        Command::Oracle { scenario, seed, runs } => load_scenario(scenario)
            .map_err(anyhow::Error::from)
            .and_then(|mut cfg| {
                Overrides {
                    seed: *seed,
                    runs: *runs,
                    iterations: None,
                }
                .apply(&mut cfg);
                print!("{}", oracle_report(&cfg)?);
                Ok(true)
            }),
        Command::Trace {
            scenario,
            seed,
            iterations,
        } => trace(scenario, *seed, *iterations).map(|()| true),
    };
    match result.with_context(|| format!("gwtf {}", command_name(&cli.command))) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Run(_) => "run",
        Command::Compare { .. } => "compare",
        Command::Oracle { .. } => "oracle",
        Command::Trace { .. } => "trace",
    }
}
