use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tog() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tog"));
    c.env_remove("TOG_BACKEND_CONFIG");
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
        .join("manifest.json")
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_hammer(dir: &Path, extra: &[&str]) -> Output {
    run(tog()
        .arg("run")
        .arg(fixture("mini"))
        .args([
            "--scene-id",
            "1001",
            "--target",
            "hammer_01",
            "--task",
            "handover",
            "--mode",
            "binary",
        ])
        .arg("--dump-trace")
        .arg(dir)
        .args(extra))
}

#[test]
fn validate_clean_fixture() {
    let o = run(tog().arg("validate").arg(fixture("synthetic")));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["issues"], serde_json::json!([]));
}

#[test]
fn validate_flags_broken_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("mini")).unwrap();
    let broken = text.replacen("\"connect\"", "\"plug\"", 1);
    assert_ne!(broken, text);
    let path = tmp.path().join("manifest.json");
    std::fs::write(&path, broken).unwrap();
    let images = tmp.path().join("images");
    std::fs::create_dir(&images).unwrap();
    for e in std::fs::read_dir(fixture("mini").with_file_name("images")).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), images.join(e.file_name())).unwrap();
    }
    let o = run(tog().arg("validate").arg(&path));
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("error"));
}

#[test]
fn missing_manifest_is_a_domain_error() {
    let o = run(tog().args(["validate", "/nonexistent/manifest.json"]));
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("tog: "));
}

#[test]
fn run_dumps_five_stage_artifacts_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = run_hammer(&a, &[]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let second = run_hammer(&b, &[]);
    assert_eq!(first.stdout, second.stdout);
    let grasp: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    assert!(grasp["x"].is_f64() && grasp["theta"].is_f64());

    let mut pngs: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    pngs.sort();
    assert_eq!(pngs.len(), 5, "{pngs:?}");
    for name in pngs.iter().map(String::as_str).chain(["trace.json"]) {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let trace: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["outcome"]["status"], "ok");
    assert_eq!(trace["log"].as_array().unwrap().len(), 7);
}

#[test]
fn failed_run_exits_one_and_still_dumps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("backend.json");
    std::fs::write(&cfg, r#"{"seed": 3, "noise": {"segment_dropout": 1.0}}"#).unwrap();
    let dir = tmp.path().join("trace");
    let o = run(tog()
        .env("TOG_BACKEND_CONFIG", &cfg)
        .arg("run")
        .arg(fixture("mini"))
        .args(["--scene-id", "1001", "--target", "hammer_01", "--task", "handover"])
        .arg("--dump-trace")
        .arg(&dir));
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("segmentation"), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let trace: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["outcome"]["stage"], "segmentation");
}

#[test]
fn usage_errors_exit_two() {
    let o = run(tog().args(["run", "--bogus"]));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"));

    let tmp = tempfile::tempdir().unwrap();
    for extra in [
        &["--tau", "1.5"][..],
        &["--tau", "0"],
        &["--n-rots", "0"],
        &["--min-area", "600", "--max-area", "500"],
    ] {
        let o = run_hammer(tmp.path(), extra);
        assert_eq!(code(&o), 2, "{extra:?}: {}", stderr(&o));
    }
    let o = run(tog().args(["eval", "--manifest", "m.json", "--split", "nowhere"]));
    assert_eq!(code(&o), 2);
    let o = run(tog().args(["eval", "--manifest", "m.json", "--format", "xml"]));
    assert_eq!(code(&o), 2);
    let o = run(&mut tog());
    assert_eq!(code(&o), 2);
}

#[test]
fn every_help_lists_paper_defaults() {
    for sub in [
        "validate",
        "refine-affordances",
        "auto-label",
        "run",
        "eval",
        "report",
        "synth",
    ] {
        let o = run(tog().args([sub, "--help"]));
        assert_eq!(code(&o), 0);
        let text = String::from_utf8_lossy(&o.stdout);
        for needle in ["400", "50000", "0.75", "30°", "0.25"] {
            assert!(text.contains(needle), "{sub} --help lacks {needle}");
        }
    }
    let o = run(tog().args(["run", "--help"]));
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["[default: 400]", "[default: 50000]", "[default: 0.75]", "[default: 36]"] {
        assert!(text.contains(flag), "{flag}");
    }
    let o = run(tog().args(["eval", "--help"]));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("[default: 0.25]") && text.contains("[default: 30]"));
    assert!(text.contains("TOG_BACKEND_CONFIG"));
}

#[test]
fn eval_is_reproducible_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for workers in ["1", "3"] {
        let dir = tmp.path().join(workers);
        let o = run(tog()
            .args(["eval", "--manifest"])
            .arg(fixture("mini"))
            .args([
                "--split",
                "all",
                "--mode",
                "standard",
                "--workers",
                workers,
                "--report-dir",
            ])
            .arg(&dir));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        reports.push(std::fs::read(dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let r: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(r["tg_accuracy"], 1.0);
    assert_eq!(r["trials"], 20);
}

#[test]
fn report_applies_partial_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("eval");
    let o = run(tog()
        .args(["eval", "--manifest"])
        .arg(fixture("mini"))
        .args(["--split", "KC-KSC", "--report-dir"])
        .arg(&dir));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let partial = tmp.path().join("partial.csv");
    std::fs::write(
        &partial,
        "object,task,partial_success\nhammer_01,handover,0.5\nghost,flying,1\n",
    )
    .unwrap();
    let out = tmp.path().join("csv");
    let o = run(tog()
        .arg("report")
        .arg(dir.join("report.json"))
        .args(["--format", "csv", "--partial"])
        .arg(&partial)
        .arg("--out-dir")
        .arg(&out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("ghost/flying"));
    let pairs = std::fs::read_to_string(out.join("pairs.csv")).unwrap();
    assert!(
        pairs
            .lines()
            .any(|l| l.starts_with("hammer_01,handover,") && l.ends_with(",0.5")),
        "{pairs}"
    );
    assert!(out.join("trials.csv").exists());

    let md = tmp.path().join("md");
    let o = run(tog()
        .arg("report")
        .arg(dir.join("report.json"))
        .arg("--out-dir")
        .arg(&md));
    assert_eq!(code(&o), 0);
    assert!(std::fs::read_to_string(md.join("report.md"))
        .unwrap()
        .starts_with("# Evaluation"));
}

#[test]
fn synth_reproduces_bundled_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tog().args(["synth", "--preset", "mini", "--out"]).arg(tmp.path()));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read(tmp.path().join("manifest.json")).unwrap(),
        std::fs::read(fixture("mini")).unwrap()
    );
}

#[test]
fn auto_label_then_refine_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let labelled = tmp.path().join("labelled/manifest.json");
    let o = run(tog().arg("auto-label").arg(fixture("mini")).arg("--out").arg(&labelled));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let refined = tmp.path().join("refined/manifest.json");
    let o = run(tog()
        .arg("refine-affordances")
        .arg(&labelled)
        .arg("--out")
        .arg(&refined));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(tog().arg("validate").arg(&refined));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!stderr(&o).contains("escapes"), "{}", stderr(&o));
}
