use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_simplex-rank"))
}

fn run(args: &[&str]) -> Output {
    run_in(Path::new("."), args)
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_FIT: [&str; 6] = ["--chains", "2", "--warmup", "300", "--samples", "300"];

/// simulate -> rank -> eval inside `dir` with relative paths, returning
/// every produced file's bytes.
fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    run_in(
        dir,
        &["simulate", "--questions", "150", "--candidates", "4", "--seed", "11", "--out", "sim"],
    );
    run_in(
        dir,
        &[
            &["rank", "--input", "sim/scores.jsonl", "--seed", "11", "--out", "rank"][..],
            &SMALL_FIT,
        ]
        .concat(),
    );
    let out = run_in(
        dir,
        &["eval", "--report", "rank/report.json", "--truth", "sim/truth.json", "--out", "eval"],
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("report\tCorr\tCov"), "{stdout}");
    let mut files = Vec::new();
    for sub in ["sim", "rank", "eval"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        for f in names {
            let rel = f.strip_prefix(dir).unwrap().display().to_string();
            files.push((rel, std::fs::read(&f).unwrap()));
        }
    }
    files
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    let names: Vec<&str> = first.iter().map(|f| f.0.as_str()).collect();
    for expected in [
        "sim/scores.jsonl",
        "sim/truth.json",
        "rank/ranks.tsv",
        "rank/report.json",
        "rank/ranks.svg",
        "eval/eval.tsv",
    ] {
        assert!(names.contains(&expected), "missing {expected} in {names:?}");
    }
    assert_eq!(first.len(), second.len());
    for ((na, da), (nb, db)) in first.iter().zip(&second) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between runs");
    }
    assert!(
        !first.iter().any(|(n, _)| n.contains(".tmp")),
        "temporary files left behind"
    );
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().args(["rank", "--no-such-flag"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn runtime_errors_are_structured() {
    let out = bin()
        .args(["rank", "--input", "/nonexistent/scores.jsonl", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("loading scores"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    run(&["simulate", "--questions", "60", "--candidates", "3", "--out", p(&sim)]);
    let cfg = dir.path().join("fit.json");
    std::fs::write(&cfg, r#"{"chains": 2, "warmup": 200, "samples": 150, "omega": 1.0}"#).unwrap();
    let rank = dir.path().join("rank");
    let out = run(&[
        "rank",
        "--input",
        p(&sim.join("scores.jsonl")),
        "--config",
        p(&cfg),
        "--samples",
        "100",
        "--out",
        p(&rank),
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("draws 200 "), "{stdout}");
    std::fs::write(&cfg, r#"{"chainz": 2}"#).unwrap();
    let bad = bin()
        .args(["rank", "--input", p(&sim.join("scores.jsonl")), "--config", p(&cfg), "--out", p(&rank)])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn baselines_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    run(&["simulate", "--questions", "80", "--candidates", "4", "--out", p(&sim)]);
    for method in ["average", "single", "bootstrap", "bt"] {
        let out = dir.path().join(method);
        run(&[
            "baseline",
            method,
            "--input",
            p(&sim.join("scores.jsonl")),
            "--replicates",
            "100",
            "--out",
            p(&out),
        ]);
        let tsv = std::fs::read_to_string(out.join("ranks.tsv")).unwrap();
        assert_eq!(tsv.lines().count(), 5, "{method}: {tsv}");
        run(&[
            "eval",
            "--report",
            p(&out.join("report.json")),
            "--truth",
            p(&sim.join("truth.json")),
        ]);
    }
}

#[test]
fn sweep_writes_grid() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    run(&["simulate", "--questions", "60", "--candidates", "3", "--out", p(&sim)]);
    let out = dir.path().join("sweep");
    run(&[
        "sweep",
        "--input",
        p(&sim.join("scores.jsonl")),
        "--omega-grid",
        "0,2",
        "--truth",
        p(&sim.join("truth.json")),
        "--out",
        p(&out),
        "--chains",
        "2",
        "--warmup",
        "200",
        "--samples",
        "100",
    ]);
    let tsv = std::fs::read_to_string(out.join("sweep.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3, "{tsv}");
    assert!(out.join("sweep.svg").exists());
}

#[test]
fn identify_tools() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("witness");
    let out = run(&["identify", "witness", "--out", p(&w)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("score difference"));
    assert!(w.join("witness.json").exists() && w.join("witness.svg").exists());

    let sim = dir.path().join("sim");
    run(&[
        "simulate", "--levels", "2", "--questions", "300", "--candidates", "4", "--out", p(&sim),
    ]);
    let b = dir.path().join("binary");
    run(&["identify", "binary", "--input", p(&sim.join("scores.jsonl")), "--out", p(&b)]);
    assert_eq!(
        std::fs::read_to_string(b.join("ranking.tsv")).unwrap().lines().count(),
        5
    );
    run(&[
        "identify",
        "binary",
        "--moderate",
        "--input",
        p(&sim.join("scores.jsonl")),
        "--out",
        p(&b),
    ]);

    let sim3 = dir.path().join("sim3");
    run(&["simulate", "--questions", "200", "--candidates", "3", "--out", p(&sim3)]);
    let e = dir.path().join("env");
    run(&[
        "identify",
        "envelope",
        "--input",
        p(&sim3.join("scores.jsonl")),
        "--vertices",
        "1,0,0;0,1,0;0,0,1",
        "--out",
        p(&e),
    ]);
    let env: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(e.join("envelope.json")).unwrap()).unwrap();
    assert_eq!(env["feasible"], true);
}

#[test]
fn judge_with_mock_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let questions = dir.path().join("questions.jsonl");
    let mock = dir.path().join("mock.jsonl");
    let mut q = String::new();
    let mut m = String::new();
    for i in 0..3 {
        q.push_str(&format!(
            r#"{{"question_id": "q{i}", "prompt": "What is {i} + {i}?", "candidates": [{{"candidate_id": "a", "answer": "{}"}}, {{"candidate_id": "b", "answer": "wrong"}}]}}"#,
            2 * i
        ));
        q.push('\n');
        for j in ["j1", "j2"] {
            m.push_str(&format!(
                r#"{{"judge_id": "{j}", "question_id": "q{i}", "scores": {{"a": 1, "b": -1}}}}"#
            ));
            m.push('\n');
        }
    }
    std::fs::write(&questions, q).unwrap();
    std::fs::write(&mock, m).unwrap();
    let out = dir.path().join("judged");
    let args = [
        "judge",
        "--questions",
        p(&questions),
        "--task",
        "math-no-ref",
        "--judge",
        "j1=model-one@fam1",
        "--judge",
        "j2=model-two",
        "--mock",
        p(&mock),
        "--out",
        p(&out),
    ];
    let first = run(&args);
    assert!(String::from_utf8_lossy(&first.stdout).contains("12 records from 6 requests"));
    let scores = std::fs::read(out.join("scores.jsonl")).unwrap();
    let second = run(&args);
    assert!(String::from_utf8_lossy(&second.stdout).contains("from 0 requests"));
    assert!(String::from_utf8_lossy(&second.stdout).contains("6 pairs resumed"));
    assert_eq!(std::fs::read(out.join("scores.jsonl")).unwrap(), scores);
    let audit = std::fs::read_to_string(out.join("audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 6);

    let bad = bin()
        .args(["judge", "--questions", p(&questions), "--task", "poetry", "--mock", p(&mock), "--out", p(&out)])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
