use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};

use choreo_core::cm::{CdId, CoordinationModel};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

/// Temporary directory removed on drop.
struct Scratch(PathBuf);

impl std::ops::Deref for Scratch {
    type Target = Path;
    fn deref(&self) -> &Path {
        &self.0
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn scratch() -> Scratch {
    static NEXT: AtomicUsize = AtomicUsize::new(0);
    let dir = std::env::temp_dir().join(format!(
        "choreo-cli-{}-{}",
        std::process::id(),
        NEXT.fetch_add(1, Ordering::Relaxed)
    ));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    Scratch(dir)
}

fn choreo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_choreo"))
        .args(args)
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_to(scenario: &str, dir: &Path, extra: &[&str]) -> Output {
    let scenario = fixtures().join(scenario);
    let mut args = vec!["run", path(&scenario), "--out-dir", path(dir)];
    args.extend_from_slice(extra);
    choreo(&args)
}

#[test]
fn validate_accepts_the_proximity_model() {
    let out = choreo(&["validate", path(&fixtures().join("proximity.cefm.json"))]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn validate_rejects_a_broken_model() {
    let dir = scratch();
    let model = dir.join("broken.json");
    std::fs::write(
        &model,
        r#"{"states":{"Initial":"initial","Final":"final","a":"plain"},"initial":"Initial","final":"Final",
            "roles":["A","B"],"variables":{},
            "flows":[{"from":"Initial","to":"a","label":"eps"},{"from":"a","to":"Initial","label":"eps"},
                     {"from":"a","to":"Final","label":{"op":{"from":"A","task":"t","to":"B"}}}]}"#,
    )
    .unwrap();
    let out = choreo(&["validate", path(&model)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("violation"));
}

#[test]
fn gen_cm_writes_the_expected_models() {
    let dir = scratch();
    let out = choreo(&[
        "gen-cm",
        path(&fixtures().join("proximity.cefm.json")),
        "--out-dir",
        path(&dir),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let mut written = 0;
    for entry in std::fs::read_dir(fixtures().join("expected_cms")).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().into_string().unwrap();
        let (i, r) = name
            .trim_start_matches("CM_")
            .trim_end_matches(".json")
            .split_once('_')
            .unwrap();
        let owner = CdId::new(i, r);
        let load = |p: &Path| {
            CoordinationModel::from_json(owner.clone(), &std::fs::read_to_string(p).unwrap())
                .unwrap()
        };
        assert_eq!(load(&dir.join(&name)), load(&entry.path()), "{name}");
        written += 1;
    }
    assert_eq!(written, 6);
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("delegates.json")).unwrap())
            .unwrap();
    assert_eq!(index.as_array().unwrap().len(), 6);
}

#[test]
fn bootstrap_prints_the_first_update() {
    let out = choreo(&["bootstrap", path(&fixtures().join("proximity.cefm.json"))]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("UPDATE(S5) -> CD(IM,UMS)\n"), "{text}");
    assert!(text.contains("CD(SPS,NMU) waits on {S14, S22}"));
}

#[test]
fn run_both_true_succeeds_with_eight_forwards() {
    let dir = scratch();
    let out = run_to("scenarios/both_true.json", &dir, &["--seed", "7"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let trace = std::fs::read_to_string(dir.join("trace.jsonl")).unwrap();
    assert_eq!(
        trace
            .lines()
            .filter(|l| l.contains(r#""kind":"Forward""#))
            .count(),
        8
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["outcome"]["status"], "completed");
    assert_eq!(report["undesired"].as_array().unwrap().len(), 0);
}

#[test]
fn run_of_a_faulty_deployment_fails() {
    let dir = scratch();
    let out = run_to("mutants/deadlocking_join.json", &dir, &[]);
    assert_eq!(out.status.code(), Some(1));
    let report = std::fs::read_to_string(dir.join("report.json")).unwrap();
    assert!(report.contains("DeadlockingJoin"));
}

#[test]
fn same_seed_gives_byte_identical_traces() {
    for policy in ["roundrobin", "random"] {
        let (a, b) = (scratch(), scratch());
        for dir in [&a, &b] {
            let out = run_to(
                "scenarios/adversarial.json",
                dir,
                &["--seed", "11", "--policy", policy],
            );
            assert_eq!(out.status.code(), Some(0));
        }
        let read = |d: &Path| std::fs::read(d.join("trace.jsonl")).unwrap();
        assert_eq!(read(&a), read(&b), "{policy}");
    }
}

#[test]
fn check_trace_accepts_recorded_runs_and_rejects_doctored_ones() {
    let dir = scratch();
    let scenario = fixtures().join("scenarios/both_true.json");
    run_to("scenarios/both_true.json", &dir, &[]);
    let trace = dir.join("trace.jsonl");
    let ok = choreo(&[
        "check-trace",
        "--scenario",
        path(&scenario),
        path(&trace),
        "--complete",
    ]);
    assert_eq!(ok.status.code(), Some(0));

    let doctored: String = std::fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .filter(|l| !(l.contains(r#""kind":"Forward""#) && l.contains("notifyFriend")))
        .map(|l| format!("{l}\n"))
        .collect();
    let bad = dir.join("doctored.jsonl");
    std::fs::write(&bad, doctored).unwrap();
    let out = choreo(&["check-trace", "--scenario", path(&scenario), path(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("violation"));
}

#[test]
fn fuzz_reports_clean_runs() {
    let dir = scratch();
    let report = dir.join("fuzz.json");
    let out = choreo(&[
        "fuzz",
        path(&fixtures().join("scenarios/both_true.json")),
        path(&fixtures().join("scenarios/adversarial.json")),
        "--runs",
        "10",
        "--out",
        path(&report),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(v["total"]["runs"], 40);
    assert_eq!(v["total"]["conformant"], 40);
}

#[test]
fn bad_arguments_exit_with_two() {
    assert_eq!(
        choreo(&["run", "x.json", "--policy", "sometimes"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        choreo(&["validate", "/does/not/exist.json"]).status.code(),
        Some(2)
    );
}
