//! End-to-end tests for the `h2o` binary: exit codes, output contracts,
//! and the synth → decode → eval loop through real files.

use std::path::Path;
use std::process::{Command, Output};

use h2o_core::datamodel::test_support::SceneBuilder;
use h2o_core::datamodel::write_dataset;
use h2o_core::Scene;

fn h2o(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_h2o"))
        .args(args)
        .output()
        .expect("spawning the binary")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn clean_scene() -> Scene {
    SceneBuilder::new(1, 640, 480)
        .person(1)
        .object(2, "cup")
        .annotate(1, "sit", Some(2), None)
        .annotate(1, "still", Some(2), None)
        .annotate(1, "hold", Some(2), None)
        .build()
}

fn write_scenes(dir: &Path, name: &str, scenes: &[Scene]) -> String {
    let path = dir.join(name);
    write_dataset(scenes, &path).expect("writing fixture dataset");
    path.to_str().expect("utf-8 path").to_string()
}

#[test]
fn validate_accepts_a_clean_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenes(dir.path(), "clean.h2o", &[clean_scene()]);
    let out = h2o(&["validate", &path]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("0 violations"), "stdout: {}", stdout(&out));
}

#[test]
fn validate_exits_one_and_counts_violations() {
    // Person 7 never gets a motion verb: one R1 breach.
    let scene = SceneBuilder::new(2, 640, 480)
        .person(7)
        .annotate(7, "stand", None, None)
        .build();
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenes(dir.path(), "breach.h2o", &[scene]);
    let out = h2o(&["validate", &path]);
    assert_eq!(exit_code(&out), 1);
    let text = stdout(&out);
    assert!(text.contains("1 violations"), "stdout: {text}");
    assert!(text.contains("R1"), "stdout: {text}");
}

#[test]
fn structural_problems_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("garbage.h2o");
    std::fs::write(&garbage, "this is not a dataset").unwrap();
    let out = h2o(&["validate", garbage.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let missing = dir.path().join("nope.h2o");
    let out = h2o(&["validate", missing.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn unknown_flags_print_usage_and_exit_two() {
    let out = h2o(&["validate", "--frobnicate", "x.h2o"]);
    assert_eq!(exit_code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr).to_lowercase();
    assert!(err.contains("usage"), "stderr: {err}");
}

#[test]
fn taxonomy_lists_every_verb() {
    let out = h2o(&["taxonomy"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout(&out);
    // Header plus one row per verb.
    assert_eq!(text.lines().count(), 52, "output:\n{text}");
    assert!(text.contains("talk on phone"));
    assert!(text.contains("undetermined motion"));
}

#[test]
fn stats_json_is_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenes(dir.path(), "clean.h2o", &[clean_scene()]);
    let out = h2o(&["stats", &path, "--json"]);
    assert_eq!(exit_code(&out), 0);
    let stats: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("valid JSON");
    assert_eq!(stats["n_images"], 1);
    assert_eq!(stats["n_persons"], 1);
    assert_eq!(stats["n_objects"], 1);
}

#[test]
fn synth_writes_the_corpus_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("corpus");
    let out = h2o(&["synth", "--out", out_dir.to_str().unwrap(), "--seeds", "0..3"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    assert!(out_dir.join("gt.h2o").is_file());
    assert!(out_dir.join("manifest.json").is_file());
    for seed in 0..3 {
        assert!(out_dir.join(format!("scene_{seed}.h2odm")).is_file());
        assert!(out_dir.join(format!("scene_{seed}.dets.json")).is_file());
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["scenes"].as_array().unwrap().len(), 3);
}

#[test]
fn decode_then_eval_recovers_perfect_scores() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("corpus");
    let out = h2o(&["synth", "--out", out_dir.to_str().unwrap(), "--seeds", "0..6"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let manifest = out_dir.join("manifest.json");
    let preds = dir.path().join("preds.h2o");
    let out = h2o(&[
        "decode",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let gt = out_dir.join("gt.h2o");
    for mode in ["original", "objectness"] {
        for role in ["1", "2"] {
            let report_path = dir.path().join(format!("report_{mode}_{role}.json"));
            let out = h2o(&[
                "eval",
                gt.to_str().unwrap(),
                preds.to_str().unwrap(),
                "--mode",
                mode,
                "--role",
                role,
                "--out",
                report_path.to_str().unwrap(),
            ]);
            assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
            let report: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
            assert_eq!(
                report["mean_ap_agent"], 1.0,
                "{mode}/role{role}: {report}"
            );
            assert_eq!(report["mean_ap_role"], 1.0, "{mode}/role{role}: {report}");
        }
    }
}

#[test]
fn outputs_are_byte_identical_across_runs_and_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("corpus");
    let out = h2o(&[
        "synth",
        "--out",
        out_dir.to_str().unwrap(),
        "--seeds",
        "0..4",
        "--noise-prob",
        "0.1",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let manifest = out_dir.join("manifest.json");
    let gt = out_dir.join("gt.h2o");

    let mut pred_bytes = Vec::new();
    for (tag, jobs) in [("a", "1"), ("b", "4"), ("c", "1")] {
        let preds = dir.path().join(format!("preds_{tag}.h2o"));
        let out = h2o(&[
            "decode",
            "--manifest",
            manifest.to_str().unwrap(),
            "--jobs",
            jobs,
            "--out",
            preds.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
        pred_bytes.push(std::fs::read(&preds).unwrap());
    }
    assert_eq!(pred_bytes[0], pred_bytes[1], "decode depends on --jobs");
    assert_eq!(pred_bytes[0], pred_bytes[2], "decode is not reproducible");

    let preds = dir.path().join("preds_a.h2o");
    let mut report_bytes = Vec::new();
    for (tag, jobs) in [("a", "1"), ("b", "4"), ("c", "1")] {
        let report = dir.path().join(format!("report_{tag}.json"));
        let out = h2o(&[
            "eval",
            gt.to_str().unwrap(),
            preds.to_str().unwrap(),
            "--mode",
            "objectness",
            "--role",
            "2",
            "--jobs",
            jobs,
            "--out",
            report.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
        report_bytes.push(std::fs::read(&report).unwrap());
    }
    assert_eq!(report_bytes[0], report_bytes[1], "eval depends on --jobs");
    assert_eq!(report_bytes[0], report_bytes[2], "eval is not reproducible");
}

#[test]
fn bench_prints_one_row_per_interaction_count() {
    let out = h2o(&["bench", "--interactions", "1,10", "--repetitions", "2"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "output:\n{text}");
    assert!(rows[0].trim_start().starts_with('1'), "output:\n{text}");
    assert!(rows[1].trim_start().starts_with("10"), "output:\n{text}");
}
