use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use choreo_core::cm::{generate_all, initial_wait_states};
use choreo_core::model::{Cefm, Operation};
use choreo_core::oracle::{
    check_trace_conformance, run_checked, Conformance, Overhead, Report, Verdict,
};
use choreo_core::participants::enactment_bootstrap;
use choreo_core::scenario::{default_priorities, Deployment, Scenario};
use choreo_core::sim::{read_trace, write_trace, Policy, RunOutcome};
use choreo_core::validate::validate_cefm;
use clap::{Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "choreo",
    version,
    about = "Enforce choreographies through coordination delegates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model for well-formedness.
    Validate { cefm: PathBuf },
    /// Write one coordination model per delegate, plus a deployment index.
    GenCm {
        cefm: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Print the messages that start an instance, and each delegate's wait states.
    Bootstrap { cefm: PathBuf },
    /// Simulate a scenario and check the run.
    Run {
        scenario: PathBuf,
        /// Defaults to the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// `roundrobin` or `random`; defaults to the scenario's policy.
        #[arg(long)]
        policy: Option<Policy>,
        #[arg(long, default_value_t = 10_000)]
        max_events: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Check a recorded trace against the scenario's model.
    CheckTrace {
        #[arg(long)]
        scenario: PathBuf,
        trace: PathBuf,
        /// Require a complete run rather than a prefix.
        #[arg(long)]
        complete: bool,
    },
    /// Run many seeds under both policies and aggregate the oracle findings.
    Fuzz {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        #[arg(long, default_value_t = 100)]
        runs: u64,
        #[arg(long, default_value_t = 10_000)]
        max_events: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command.execute() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

impl Command {
    /// `Ok(false)` means the command ran but its check failed.
    fn execute(self) -> Result<bool> {
        match self {
            Command::Validate { cefm } => validate(&cefm),
            Command::GenCm { cefm, out_dir } => gen_cm(&cefm, &out_dir),
            Command::Bootstrap { cefm } => bootstrap(&cefm),
            Command::Run {
                scenario,
                seed,
                policy,
                max_events,
                out_dir,
            } => run(&scenario, seed, policy, max_events, &out_dir),
            Command::CheckTrace {
                scenario,
                trace,
                complete,
            } => check_trace(&scenario, &trace, complete),
            Command::Fuzz {
                scenarios,
                runs,
                max_events,
                out,
            } => fuzz(&scenarios, runs, max_events, out.as_deref()),
        }
    }
}

fn load_model(path: &Path) -> Result<Cefm> {
    Ok(Cefm::load(path)?)
}

fn load_deployment(path: &Path) -> Result<(Scenario, Deployment)> {
    let sc = Scenario::load(path)?;
    let dep = Deployment::new(&sc).with_context(|| format!("deploying {}", path.display()))?;
    Ok((sc, dep))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn validate(path: &Path) -> Result<bool> {
    let report = validate_cefm(&load_model(path)?);
    for v in &report.violations {
        println!("violation: {v}");
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    if report.is_valid() {
        println!("{}: valid", path.display());
    }
    Ok(report.is_valid())
}

#[derive(Serialize)]
struct DelegateEntry {
    owner: String,
    cm_file: String,
    priority: u32,
}

fn gen_cm(path: &Path, out_dir: &Path) -> Result<bool> {
    let model = load_model(path)?;
    let cms = generate_all(&model)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let priorities = default_priorities(cms.keys().cloned());
    let mut index = Vec::new();
    for (cd, cm) in &cms {
        let file = format!("CM_{}_{}.json", cd.initiator, cd.receiver);
        std::fs::write(out_dir.join(&file), cm.to_json() + "\n")
            .with_context(|| format!("writing {file}"))?;
        index.push(DelegateEntry {
            owner: cd.to_string(),
            cm_file: file,
            priority: priorities[cd].0,
        });
    }
    write_json(&out_dir.join("delegates.json"), &index)?;
    println!(
        "wrote {} coordination models to {}",
        cms.len(),
        out_dir.display()
    );
    Ok(true)
}

fn bootstrap(path: &Path) -> Result<bool> {
    let model = load_model(path)?;
    let cms = generate_all(&model)?;
    for (cd, state) in enactment_bootstrap(&model, &cms)? {
        println!("UPDATE({state}) -> CD({cd})");
    }
    for (cd, cm) in &cms {
        let states: Vec<String> = initial_wait_states(cm)
            .iter()
            .map(|s| s.to_string())
            .collect();
        println!("CD({cd}) waits on {{{}}}", states.join(", "));
    }
    Ok(true)
}

#[derive(Serialize)]
struct RunReport<'a> {
    scenario: String,
    seed: u64,
    policy: Policy,
    outcome: &'a RunOutcome,
    operations: Vec<String>,
    undesired: Vec<&'a Verdict>,
    conformance: &'a Conformance,
    overhead: Overhead,
}

fn run(
    path: &Path,
    seed: Option<u64>,
    policy: Option<Policy>,
    max_events: u64,
    out_dir: &Path,
) -> Result<bool> {
    let (sc, dep) = load_deployment(path)?;
    let seed = seed.unwrap_or(sc.seed);
    let policy = policy.unwrap_or(sc.policy);
    let run = run_checked(&dep, seed, policy, max_events)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let trace_path = out_dir.join("trace.jsonl");
    let mut out = BufWriter::new(
        File::create(&trace_path).with_context(|| format!("writing {}", trace_path.display()))?,
    );
    write_trace(&run.trace, &mut out)?;
    out.flush()?;
    let report = RunReport {
        scenario: path.display().to_string(),
        seed,
        policy,
        outcome: &run.outcome,
        operations: run.operations().iter().map(Operation::to_string).collect(),
        undesired: run.undesired().collect(),
        conformance: &run.conformance,
        overhead: run.overhead,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    println!("{}", run.outcome);
    for op in &report.operations {
        println!("  {op}");
    }
    println!(
        "{} forwards, {} undesired, {}, {} updates + {} notifies (bound {})",
        report.operations.len(),
        report.undesired.len(),
        if run.conformance.is_conformant() {
            "conformant"
        } else {
            "NOT conformant"
        },
        run.overhead.updates,
        run.overhead.notifies,
        run.overhead.bound,
    );
    Ok(run.is_clean())
}

fn check_trace(scenario: &Path, trace: &Path, complete: bool) -> Result<bool> {
    let (_, dep) = load_deployment(scenario)?;
    let file = File::open(trace).with_context(|| format!("opening {}", trace.display()))?;
    let events = read_trace(BufReader::new(file))?;
    let verdict = check_trace_conformance(&events, &dep.model, &dep.environment, complete)?;
    println!("{}", serde_json::to_string_pretty(&verdict)?);
    Ok(verdict.is_conformant())
}

#[derive(Serialize)]
struct FuzzReport {
    total: Report,
    scenarios: BTreeMap<String, Report>,
}

fn fuzz(paths: &[PathBuf], runs: u64, max_events: u64, out: Option<&Path>) -> Result<bool> {
    let mut total = Report::default();
    let mut scenarios = BTreeMap::new();
    for path in paths {
        let (_, dep) = load_deployment(path)?;
        let mut report = Report::default();
        for policy in [Policy::RoundRobin, Policy::SeededRandom] {
            for seed in 0..runs {
                let run = run_checked(&dep, seed, policy, max_events)?;
                report.add(&run);
                total.add(&run);
            }
        }
        scenarios.insert(path.display().to_string(), report);
    }
    let clean = total.undesired() == 0 && total.conformant == total.runs;
    let report = FuzzReport { total, scenarios };
    match out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    eprintln!(
        "{} runs, {} undesired, {} conformant",
        report.total.runs,
        report.total.undesired(),
        report.total.conformant
    );
    Ok(clean)
}
