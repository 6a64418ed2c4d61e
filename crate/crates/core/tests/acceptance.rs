//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS or FAIL line, even when all pass.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use choreo_core::cm::{generate_all, initial_wait_states, CdId, CoordinationModel};
use choreo_core::generator::{random_cases, GenConfig};
use choreo_core::interp::reference_traces;
use choreo_core::model::{Cefm, Operation, StateId};
use choreo_core::oracle::{run_checked, CheckedRun, Classification};
use choreo_core::predicate::{Environment, Value};
use choreo_core::scenario::{Deployment, Scenario};
use choreo_core::sim::{explore_exhaustive, write_trace, Event, Policy, RunOutcome, Simulation};

const GENERATION_BUDGET: Duration = Duration::from_secs(1);
const PREVENTION_BUDGET: Duration = Duration::from_secs(30);
const RANDOM_BUDGET: Duration = Duration::from_secs(300);
const SEEDS: u64 = 100;
const RANDOM_MODELS: usize = 200;
const RANDOM_SEEDS: u64 = 50;
const UNROLL: u32 = 3;
const MAX_EVENTS: u64 = 100_000;
const MAX_EXPLORED: usize = 2_000_000;
const GENERATOR_SEED: u64 = 0x5eed;
const POLICIES: [Policy; 2] = [Policy::RoundRobin, Policy::SeededRandom];

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(rel)
}

fn load(rel: &str) -> Result<(Scenario, Deployment), String> {
    let sc = Scenario::load(fixture(rel)).map_err(|e| format!("{rel}: {e}"))?;
    let dep = Deployment::new(&sc).map_err(|e| format!("{rel}: {e}"))?;
    Ok((sc, dep))
}

fn proximity() -> Result<Cefm, String> {
    Cefm::load(fixture("proximity.cefm.json")).map_err(|e| e.to_string())
}

fn env(share: bool, found: bool) -> Environment {
    Environment::new()
        .with("shareEnabled", Value::Bool(share))
        .with("friendFound", Value::Bool(found))
}

fn check(run: &CheckedRun, what: &str) -> Result<(), String> {
    if let Some(v) = run.undesired().next() {
        return Err(format!(
            "{what}: {:?} at {:?}",
            v.classification, v.evidence
        ));
    }
    if !run.conformance.is_conformant() {
        return Err(format!("{what}: {:?}", run.conformance));
    }
    Ok(())
}

/// Runs shared between criteria 3 to 6 feed the overhead criterion.
#[derive(Default)]
struct Overheads {
    runs: usize,
    worst: f64,
    over: Vec<String>,
}

impl Overheads {
    fn add(&mut self, run: &CheckedRun, what: &str) {
        self.runs += 1;
        let o = run.overhead;
        if o.bound > 0 {
            self.worst = self.worst.max(o.total() as f64 / o.bound as f64);
        }
        if !o.within_bound() {
            self.over.push(format!(
                "{what}: {}+{} > {}",
                o.updates, o.notifies, o.bound
            ));
        }
    }
}

type Outcome = Result<String, String>;

fn coordination_models() -> Outcome {
    let m = proximity()?;
    let start = Instant::now();
    let cms = generate_all(&m).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut golden = BTreeMap::new();
    for (i, r) in [
        ("IM", "UMS"),
        ("IM", "SPS"),
        ("SPS", "UMS"),
        ("SPS", "SocialProxApp"),
        ("SPS", "NMU"),
        ("SPS", "NMF"),
    ] {
        let text = std::fs::read_to_string(fixture(&format!("expected_cms/CM_{i}_{r}.json")))
            .map_err(|e| e.to_string())?;
        let cd = CdId::new(i, r);
        let cm = CoordinationModel::from_json(cd.clone(), &text).map_err(|e| e.to_string())?;
        golden.insert(cd, cm);
    }
    if cms != golden {
        let differing: Vec<String> = golden
            .keys()
            .chain(cms.keys())
            .filter(|k| cms.get(*k) != golden.get(*k))
            .map(|k| k.to_string())
            .collect();
        return Err(format!("differs at {differing:?}"));
    }
    if elapsed >= GENERATION_BUDGET {
        return Err(format!("took {elapsed:?}"));
    }
    let tuples: usize = cms.values().map(|c| c.tuples.len()).sum();
    Ok(format!("6 models, {tuples} tuples, in {elapsed:?}"))
}

fn bootstrap() -> Outcome {
    let cms = generate_all(&proximity()?).map_err(|e| e.to_string())?;
    let expected: [(&str, &[&str]); 6] = [
        ("IM,UMS", &["S5"]),
        ("IM,SPS", &["S9"]),
        ("SPS,UMS", &["S10"]),
        ("SPS,SocialProxApp", &["S3"]),
        ("SPS,NMU", &["S14", "S22"]),
        ("SPS,NMF", &["S11", "S21"]),
    ];
    for (cd, states) in expected {
        let cd: CdId = cd.parse()?;
        let want: BTreeSet<StateId> = states.iter().map(|s| StateId::new(*s)).collect();
        let got = initial_wait_states(&cms[&cd]);
        if got != want {
            return Err(format!("{cd}: {got:?}"));
        }
    }
    Ok("all six wait sets match".into())
}

fn ordering(
    overheads: &mut Overheads,
    completed: &mut Vec<(Environment, Vec<Operation>)>,
) -> Outcome {
    let (_, dep) = load("scenarios/both_true.json")?;
    let prefix = ["getUserPref", "matchGPS", "getFriends", "getLocations"];
    let mut orders = BTreeMap::new();
    for policy in POLICIES {
        for seed in 0..SEEDS {
            let what = format!("seed {seed} {policy:?}");
            let run = run_checked(&dep, seed, policy, MAX_EVENTS).map_err(|e| e.to_string())?;
            overheads.add(&run, &what);
            check(&run, &what)?;
            if !run.outcome.is_completed() {
                return Err(format!("{what}: {}", run.outcome));
            }
            let ops = run.operations();
            completed.push((dep.environment.clone(), ops.clone()));
            let tasks: Vec<String> = ops
                .iter()
                .map(|o| format!("{}@{}", o.task, o.receiver))
                .collect();
            let ok = ops.len() == 8
                && ops.iter().zip(prefix).all(|(o, t)| o.task.as_str() == t)
                && BTreeSet::from([tasks[4].as_str(), tasks[5].as_str()])
                    == BTreeSet::from(["notifyUser@NMU", "notifyFriend@NMF"])
                && tasks[6] == "startItin@NMF"
                && tasks[7] == "startItin@NMU";
            if !ok {
                return Err(format!("{what}: {tasks:?}"));
            }
            *orders.entry(tasks[4].clone()).or_insert(0) += 1;
        }
    }
    if orders.len() != 2 {
        return Err(format!("only one middle order witnessed: {orders:?}"));
    }
    Ok(format!(
        "{} runs, notifyUser first {}x, notifyFriend first {}x",
        2 * SEEDS,
        orders["notifyUser@NMU"],
        orders["notifyFriend@NMF"]
    ))
}

fn prevention(
    overheads: &mut Overheads,
    completed: &mut Vec<(Environment, Vec<Operation>)>,
) -> Outcome {
    let start = Instant::now();
    let mut runs = 0;
    let mut blocked_early = 0;
    for mode in ["both_true_inorder", "both_true", "adversarial"] {
        let (_, dep) = load(&format!("scenarios/{mode}.json"))?;
        for policy in POLICIES {
            for seed in 0..SEEDS {
                let what = format!("{mode} seed {seed} {policy:?}");
                let run = run_checked(&dep, seed, policy, MAX_EVENTS).map_err(|e| e.to_string())?;
                runs += 1;
                overheads.add(&run, &what);
                check(&run, &what)?;
                if !run.outcome.is_completed() {
                    return Err(format!("{what}: {}", run.outcome));
                }
                completed.push((dep.environment.clone(), run.operations()));
                if mode == "adversarial" {
                    early_request_held_back(&run.trace).map_err(|e| format!("{what}: {e}"))?;
                    blocked_early += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= PREVENTION_BUDGET {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!(
        "{runs} runs, zero undesired, early startItin blocked then released in {blocked_early}/{blocked_early}, in {elapsed:?}"
    ))
}

fn early_request_held_back(trace: &[choreo_core::sim::TraceEvent]) -> Result<(), String> {
    let aux = |e: &Event| match e {
        Event::Block { session, task, cd }
        | Event::Forward {
            session, task, cd, ..
        } => session.contains('!') && task.as_str() == "startItin" && cd.to_string() == "SPS,NMU",
        _ => false,
    };
    let blocked = trace
        .iter()
        .position(|e| matches!(e.event, Event::Block { .. }) && aux(&e.event))
        .ok_or("early startItin was never blocked")?;
    let forwarded = trace
        .iter()
        .position(|e| matches!(e.event, Event::Forward { .. }) && aux(&e.event))
        .ok_or("early startItin was never forwarded")?;
    let notified = |task: &str| {
        trace
            .iter()
            .position(|e| e.event.forwarded().is_some_and(|o| o.task.as_str() == task))
    };
    let both = notified("notifyUser")
        .zip(notified("notifyFriend"))
        .map(|(a, b)| a.max(b))
        .ok_or("a notification is missing")?;
    if !(blocked < forwarded && both < forwarded) {
        return Err(format!(
            "blocked at {blocked}, notified by {both}, forwarded at {forwarded}"
        ));
    }
    Ok(())
}

fn conformance(
    completed: &mut Vec<(Environment, Vec<Operation>)>,
    overheads: &mut Overheads,
) -> Outcome {
    let m = proximity()?;
    for rel in [
        "scenarios/share_disabled.json",
        "scenarios/friend_not_found.json",
    ] {
        let (_, dep) = load(rel)?;
        for policy in POLICIES {
            for seed in 0..SEEDS {
                let what = format!("{rel} seed {seed} {policy:?}");
                let run = run_checked(&dep, seed, policy, MAX_EVENTS).map_err(|e| e.to_string())?;
                overheads.add(&run, &what);
                check(&run, &what)?;
                if run.outcome.is_completed() {
                    completed.push((dep.environment.clone(), run.operations()));
                }
            }
        }
    }
    let mut languages = BTreeMap::new();
    for (e, ops) in completed.iter() {
        if !languages.contains_key(e) {
            let lang = reference_traces(&m, e, UNROLL).map_err(|err| err.to_string())?;
            languages.insert(e.clone(), lang.runs);
        }
        if !languages[e].contains(ops) {
            return Err(format!("{e}: {ops:?} is not a reference run"));
        }
    }
    let both = reference_traces(&m, &env(true, true), UNROLL).map_err(|e| e.to_string())?;
    let off = reference_traces(&m, &env(false, true), UNROLL).map_err(|e| e.to_string())?;
    if both.runs.len() != 2 || off.runs.len() != 1 {
        return Err(format!(
            "language sizes {} and {}, expected 2 and 1",
            both.runs.len(),
            off.runs.len()
        ));
    }
    Ok(format!(
        "{} completed traces all in the reference language; |L(both true)|=2, |L(share off)|=1",
        completed.len()
    ))
}

fn random_equivalence(overheads: &mut Overheads) -> Outcome {
    let start = Instant::now();
    let cases = random_cases(GENERATOR_SEED, RANDOM_MODELS, &GenConfig::default(), UNROLL);
    let models: BTreeMap<String, &Cefm> = cases
        .iter()
        .map(|c| (c.model.to_json(), &c.model))
        .collect();
    let mut shapes = BTreeMap::new();
    for m in models.values() {
        for kind in m.states().values() {
            *shapes.entry(format!("{kind:?}")).or_insert(0usize) += 1;
        }
    }
    let mut runs = 0;
    let mut explored = 0;
    for (i, case) in cases.iter().enumerate() {
        let what = format!("case {i} under {}", case.env);
        let sc = Scenario::new(case.model.clone(), case.env.clone(), case.scripts.clone());
        let dep = Deployment::new(&sc).map_err(|e| format!("{what}: {e}"))?;
        let expected = case.expected();
        let exploration =
            explore_exhaustive(&dep, 0, MAX_EXPLORED).map_err(|e| format!("{what}: {e}"))?;
        explored += exploration.states;
        let mut enforced = if case.reference.runs.is_empty() {
            exploration.stuck.clone()
        } else {
            if !exploration.stuck.is_empty() {
                return Err(format!("{what}: some schedule gets stuck"));
            }
            exploration.completed.clone()
        };
        let schedules = std::iter::once((0, Policy::RoundRobin))
            .chain((0..RANDOM_SEEDS).map(|s| (s, Policy::SeededRandom)));
        for (seed, policy) in schedules {
            let run = run_checked(&dep, seed, policy, MAX_EVENTS).map_err(|e| e.to_string())?;
            runs += 1;
            let w = format!("{what} seed {seed} {policy:?}");
            overheads.add(&run, &w);
            check(&run, &w)?;
            let ops = run.operations();
            if !expected.contains(&ops) {
                return Err(format!("{w}: {ops:?} not in the reference set"));
            }
            enforced.insert(ops);
        }
        if &enforced != expected {
            return Err(format!(
                "{what}: {} enforced sequences vs {} reference sequences\n{}",
                enforced.len(),
                expected.len(),
                case.model.to_json()
            ));
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= RANDOM_BUDGET {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!(
        "{} models, {} valuations, {runs} runs, {explored} explored configurations, forks {} loops {} alternatives {}, in {elapsed:?}",
        models.len(),
        cases.len(),
        shapes.get("Fork").unwrap_or(&0),
        shapes.get("Loop").unwrap_or(&0),
        shapes.get("Alternative").unwrap_or(&0),
    ))
}

fn oracle_completeness() -> Outcome {
    let mutants = [
        ("undesired_task", Classification::UndesiredTask),
        ("invalid_alternative", Classification::InvalidAlternative),
        ("invalid_loop", Classification::InvalidLoop),
        ("missed_loop", Classification::MissedLoop),
        ("missed_join", Classification::MissedJoin),
        ("deadlocking_join", Classification::DeadlockingJoin),
    ];
    let mut seen = BTreeSet::new();
    for (name, expected) in mutants {
        let (sc, dep) = load(&format!("mutants/{name}.json"))?;
        let run = run_checked(&dep, sc.seed, sc.policy, 2_000).map_err(|e| e.to_string())?;
        let got = run.undesired().next().map(|v| v.classification);
        if got != Some(expected) {
            return Err(format!("{name}: expected {expected:?}, got {got:?}"));
        }
        if expected == Classification::DeadlockingJoin
            && !matches!(run.outcome, RunOutcome::Deadlocked { .. })
        {
            return Err(format!("{name}: outcome {}", run.outcome));
        }
        let mut control = sc.clone();
        control.faults.clear();
        let control = Deployment::new(&control).map_err(|e| e.to_string())?;
        let clean = run_checked(&control, sc.seed, sc.policy, 2_000).map_err(|e| e.to_string())?;
        if let Some(v) = clean.undesired().next() {
            return Err(format!("{name} without fault: {:?}", v.classification));
        }
        seen.insert(got);
    }
    if seen.len() != 6 {
        return Err(format!("only {} distinct verdicts", seen.len()));
    }
    Ok(
        "six mutants, six distinct verdicts, suppressed NOTIFY ends deadlocked, controls clean"
            .into(),
    )
}

fn overhead(o: &Overheads) -> Outcome {
    if !o.over.is_empty() {
        return Err(format!(
            "{} runs over the bound, first: {}",
            o.over.len(),
            o.over[0]
        ));
    }
    Ok(format!(
        "{} runs, worst ratio to bound {:.2}",
        o.runs, o.worst
    ))
}

fn trace_bytes(
    dep: &Deployment,
    seed: u64,
    policy: Policy,
    path: &Path,
) -> Result<Vec<u8>, String> {
    let mut sim = Simulation::new(dep, seed, policy);
    sim.run_to_quiescence(MAX_EVENTS)
        .map_err(|e| e.to_string())?;
    let file = std::fs::File::create(path).map_err(|e| e.to_string())?;
    write_trace(sim.trace(), std::io::BufWriter::new(file)).map_err(|e| e.to_string())?;
    std::fs::read(path).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("choreo-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let mut compared = 0;
    let mut result = Ok(());
    'outer: for name in ["both_true", "adversarial", "share_disabled"] {
        let (_, dep) = load(&format!("scenarios/{name}.json"))?;
        for policy in POLICIES {
            for seed in [0, 7, 12345] {
                let a = trace_bytes(&dep, seed, policy, &dir.join("a.jsonl"))?;
                let b = trace_bytes(&dep, seed, policy, &dir.join("b.jsonl"))?;
                compared += 1;
                if a != b || a.is_empty() {
                    result = Err(format!("{name} seed {seed} {policy:?} differs"));
                    break 'outer;
                }
            }
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    result.map(|()| format!("{compared} scenario/seed/policy triples byte-identical"))
}

fn main() -> ExitCode {
    let mut overheads = Overheads::default();
    let mut completed = Vec::new();
    let results: Vec<(&str, Outcome)> = vec![
        ("1 coordination models reproduced", coordination_models()),
        ("2 bootstrap wait states", bootstrap()),
        (
            "3 notification ordering",
            ordering(&mut overheads, &mut completed),
        ),
        (
            "4 undesired-interaction prevention",
            prevention(&mut overheads, &mut completed),
        ),
        ("5 conformance", conformance(&mut completed, &mut overheads)),
        (
            "6 randomized equivalence",
            random_equivalence(&mut overheads),
        ),
        ("7 oracle completeness", oracle_completeness()),
        ("8 overhead bound", overhead(&overheads)),
        ("9 determinism", determinism()),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail})");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
