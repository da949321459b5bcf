use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

use mlkd::cli::RunManifest;

const SMALL: &str = r#"{
    "teacher_model": {"n_layers": 1, "n_heads": 2, "d_hidden": 16, "d_ff": 32, "dropout": 0.1},
    "student_model": {"n_layers": 1, "n_heads": 2, "d_hidden": 16, "d_ff": 32},
    "max_epochs": 3
}"#;

fn mlkd(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlkd"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn last_line(out: &Output) -> Value {
    let err = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(err.lines().last().expect("stderr has a line")).expect("last line is JSON")
}

fn ok(cwd: &Path, args: &[&str]) -> Output {
    let out = mlkd(cwd, args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(last_line(&out)["status"], "ok");
    out
}

fn failure(cwd: &Path, args: &[&str], code: i32, kind: &str) -> Value {
    let out = mlkd(cwd, args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let line = last_line(&out);
    assert_eq!(line["status"], "error");
    assert_eq!(line["kind"], kind);
    assert_eq!(line["exit_code"], code);
    line
}

/// Small corpus, three teachers and probed copies, built once per test binary.
fn workspace() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        std::fs::write(dir.join("small.json"), SMALL).unwrap();
        ok(&dir, &["gen-data", "--n-dialogues", "30", "--run-dir", "data"]);
        for task in ["id", "sf", "dc"] {
            ok(
                &dir,
                &[
                    "train-teacher", "--task", task, "--corpus", "data/corpus.json", "--config", "small.json",
                    "--run-dir", &format!("t-{task}"),
                ],
            );
        }
        ok(
            &dir,
            &[
                "train-probes", "--target", "id,sf,dc", "--teachers", "t-id/teacher,t-sf/teacher,t-dc/teacher",
                "--corpus", "data/corpus.json", "--config", "small.json", "--run-dir", "probes",
            ],
        );
        dir
    })
}

const PROBED: &str = "probes/probed/id,probes/probed/sf,probes/probed/dc";

fn files_under(root: &Path, dir: &Path, out: &mut Vec<String>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files_under(root, &p, out);
        } else {
            out.push(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
        }
    }
}

fn assert_manifest_complete(run_dir: &Path) {
    let m = RunManifest::read(run_dir).unwrap();
    assert_eq!(m.status, "ok");
    let mut on_disk = Vec::new();
    files_under(run_dir, run_dir, &mut on_disk);
    on_disk.retain(|f| f != "manifest.json");
    on_disk.sort();
    let mut listed = m.artifacts.clone();
    listed.sort();
    assert_eq!(listed, on_disk, "{}", run_dir.display());
}

#[test]
fn help_lists_the_defaults() {
    let out = mlkd(Path::new("."), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["5e-5", "batch size 32", "warmup 10%", "patience 10", "margin 0.2", "max tokens 512"] {
        assert!(text.contains(needle), "{needle}");
    }
    for cmd in ["gen-data", "train-teacher", "train-probes", "distill", "eval", "sweep", "gradcheck"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

#[test]
fn failures_exit_nonzero_with_a_json_last_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    failure(d, &["distill", "--bogus"], 2, "usage");
    std::fs::write(d.join("typo.json"), r#"{"learning_rte": 1e-4}"#).unwrap();
    let line = failure(d, &["train-teacher", "--config", "typo.json", "--run-dir", "x"], 2, "config");
    assert!(line["message"].as_str().unwrap().contains("learning_rte"));
    let line = failure(d, &["gen-data", "--config", "typo.json", "--run-dir", "x2"], 2, "config");
    assert!(line["message"].as_str().unwrap().contains("--spec"));
    failure(d, &["train-teacher", "--task", "id", "--run-dir", "y"], 2, "config");
    failure(d, &["train-teacher", "--task", "id", "--corpus", "missing.json", "--run-dir", "z"], 3, "io");
    let m = RunManifest::read(d.join("z")).unwrap();
    assert_eq!(m.status, "error");
    assert!(m.error.unwrap().contains("missing.json"));
}

#[test]
fn distilling_from_unprobed_teachers_is_rejected() {
    let w = workspace();
    let line = failure(
        w,
        &[
            "distill", "--task", "id", "--teachers", "t-id/teacher,t-sf/teacher", "--corpus", "data/corpus.json",
            "--config", "small.json", "--run-dir", "unprobed",
        ],
        2,
        "checkpoint",
    );
    assert!(line["message"].as_str().unwrap().contains("no ID head"));
}

#[test]
fn every_run_lists_its_files() {
    let w = workspace();
    for dir in ["data", "t-id", "t-sf", "t-dc", "probes"] {
        assert_manifest_complete(&w.join(dir));
    }
    for dir in ["probes/probed/id", "probes/probed/sf", "probes/probed/dc"] {
        assert!(w.join(dir).join("manifest.json").exists(), "{dir}");
        assert!(w.join(dir).join("params.bin").exists(), "{dir}");
    }
}

#[test]
fn best_loss_set_history_has_no_tp() {
    let w = workspace();
    ok(
        w,
        &[
            "distill", "--task", "sf", "--teachers", PROBED, "--losses", "kd,sce,sim,rel", "--corpus",
            "data/corpus.json", "--config", "small.json", "--run-dir", "best",
        ],
    );
    let history = std::fs::read_to_string(w.join("best/student/history.jsonl")).unwrap();
    assert!(!history.is_empty());
    for line in history.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v.get("tp").is_none());
        for k in ["kd", "sce", "sim", "rel", "total"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
    assert_manifest_complete(&w.join("best"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(w.join("best/reports/sf-test.json")).unwrap()).unwrap();
    assert_eq!(report["metric"], "micro_f1");
    assert_eq!(report["mode"], "all_classes");

    let out = ok(w, &["eval", "--checkpoint", "best/student", "--corpus", "data/corpus.json", "--run-dir", "best-eval"]);
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed["value"], report["value"]);
}

#[test]
fn flags_override_the_config_file() {
    let w = workspace();
    let cfg = r#"{"learning_rate": 1e-4, "batch_size": 16, "teacher_model": {"n_layers": 1, "n_heads": 2, "d_hidden": 16, "d_ff": 32}}"#;
    std::fs::write(w.join("precedence.json"), cfg).unwrap();
    ok(
        w,
        &[
            "train-teacher", "--task", "dc", "--corpus", "data/corpus.json", "--config", "precedence.json", "--lr",
            "5e-5", "--teacher-epochs", "1", "--run-dir", "precedence",
        ],
    );
    let m = RunManifest::read(w.join("precedence")).unwrap();
    assert_eq!(m.config["learning_rate"], 5e-5);
    assert_eq!(m.config["batch_size"], 16);
    assert_eq!(m.config["teacher_epochs"], 1);
    assert_eq!(m.config["max_tokens"], 512);
    let written: Value = serde_json::from_str(&std::fs::read_to_string(w.join("precedence/config.json")).unwrap()).unwrap();
    assert_eq!(written, m.config);
}

#[test]
fn sweep_cell_matches_a_standalone_distillation() {
    let w = workspace();
    std::fs::write(
        w.join("grid.json"),
        r#"{"tasks": ["id"], "teacher_subsets": [["ID", "SF"], ["ID", "SF", "DC"]], "loss_sets": [["kd", "sce", "sim", "rel"]]}"#,
    )
    .unwrap();
    ok(
        w,
        &[
            "sweep", "--grid", "grid.json", "--teachers", PROBED, "--corpus", "data/corpus.json", "--config",
            "small.json", "--seed", "40", "--run-dir", "sweep",
        ],
    );
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(w.join("sweep/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 2);
    let pair = w.join("sweep/cells/000-ID-ID+SF-kd+sce+sim");
    let pair_history = std::fs::read_to_string(pair.join("student/history.jsonl")).unwrap();
    assert!(pair_history.lines().all(|l| !l.contains("\"rel\"")));
    let cell = w.join("sweep/cells/001-ID-ID+SF+DC-kd+sce+sim+rel");
    assert_eq!(RunManifest::read(&cell).unwrap().seed, 41);
    assert_manifest_complete(&w.join("sweep"));

    ok(
        w,
        &[
            "distill", "--task", "id", "--teachers", PROBED, "--losses", "kd,sce,sim,rel", "--corpus",
            "data/corpus.json", "--config", "small.json", "--seed", "41", "--run-dir", "standalone",
        ],
    );
    for f in ["student/history.jsonl", "student/params.bin", "reports/id-dev.json", "reports/id-test.json", "config.json"] {
        assert_eq!(
            std::fs::read(cell.join(f)).unwrap(),
            std::fs::read(w.join("standalone").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn gradcheck_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["gradcheck", "--coordinates", "20", "--run-dir", "gc"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for loss in ["kd", "sce", "sim", "rel", "tp"] {
        assert!(text.contains(loss), "{loss}");
    }
    assert!(tmp.path().join("gc/gradcheck.json").exists());
    assert_manifest_complete(&tmp.path().join("gc"));
}
