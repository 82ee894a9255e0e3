use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn melo(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_melo"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn melo")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    let cfg = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/small.toml");
    fs::copy(cfg, dir.path().join("small.toml")).unwrap();
    dir
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = melo(args, dir);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    stdout(&out)
}

#[test]
fn full_pipeline_round_trip() {
    let dir = setup();
    let d = dir.path();
    ok(&["gen", "--config", "small.toml", "--out", "data.jsonl"], d);
    let lines = fs::read_to_string(d.join("data.jsonl")).unwrap();
    assert!(lines.lines().any(|l| l.contains("\"split\":\"edit:3\"")));
    assert!(lines.lines().any(|l| l.contains("\"split\":\"oos\"")));

    ok(&["pretrain", "--config", "small.toml", "--out", "s0.bin"], d);
    let log = ok(&["edit", "--snapshot", "s0.bin", "--stream", "data.jsonl", "--out", "s1.bin"], d);
    let reports: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports.len(), 3);
    assert_eq!(reports[2]["block"], 3);

    let summary = ok(&["eval", "--snapshot", "s1.bin", "--stream", "data.jsonl", "--out", "rep"], d);
    assert!(summary.contains("edits 36"), "{summary}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("rep/report.json")).unwrap()).unwrap();
    assert_eq!(report["edits"], 36);
    assert!(fs::read_to_string(d.join("rep/report.csv")).unwrap().starts_with("edits,es,"));

    let text = ok(&["inspect", "--snapshot", "s1.bin", "--out", "ins"], d);
    let n: usize = text.split_whitespace().next().unwrap().parse().unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("cluster ")).count(), n);
    assert_eq!(fs::read_to_string(d.join("ins/clusters.jsonl")).unwrap().lines().count(), n);
    assert!(fs::read_to_string(d.join("ins/keys.csv")).unwrap().starts_with("cluster,block,k0"));
}

#[test]
fn seed_flag_changes_the_dataset() {
    let dir = setup();
    let d = dir.path();
    ok(&["gen", "--config", "small.toml", "--out", "a.jsonl"], d);
    ok(&["gen", "--config", "small.toml", "--out", "b.jsonl"], d);
    ok(&["gen", "--config", "small.toml", "--seed", "99", "--out", "c.jsonl"], d);
    let read = |f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
}

#[test]
fn edit_failure_exits_2_with_incomplete_snapshot() {
    let dir = setup();
    let d = dir.path();
    let cfg = fs::read_to_string(d.join("small.toml")).unwrap().replace("iterations = 150", "iterations = 0");
    fs::write(d.join("zero.toml"), cfg).unwrap();
    ok(&["gen", "--config", "zero.toml", "--out", "data.jsonl"], d);
    ok(&["pretrain", "--config", "zero.toml", "--out", "s0.bin"], d);
    let out = melo(&["edit", "--snapshot", "s0.bin", "--stream", "data.jsonl", "--out", "s1.bin"], d);
    assert_eq!(code(&out), 2);
    let summary = ok(&["eval", "--snapshot", "s1.bin", "--stream", "data.jsonl"], d);
    assert!(summary.contains("failed at batch 1"), "{summary}");
    let again = melo(&["edit", "--snapshot", "s1.bin", "--stream", "data.jsonl", "--out", "s2.bin"], d);
    assert_eq!(code(&again), 1);
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&melo(&["edit"], d)), 1);
    assert_eq!(code(&melo(&["sweep", "--axis", "width", "--values", "1", "--out", "x"], d)), 1);
    assert_eq!(code(&melo(&[], d)), 1);
    fs::write(d.join("bad.toml"), "[editor]\nradius = 2.0\n").unwrap();
    let out = melo(&["gen", "--config", "bad.toml", "--out", "x"], d);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("radius"));
    assert_eq!(code(&melo(&["--help"], d)), 0);
}

#[test]
fn io_and_format_errors_exit_3() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&melo(&["inspect", "--snapshot", "missing.bin"], d)), 3);
    ok(&["pretrain", "--config", "small.toml", "--out", "s0.bin"], d);
    let bytes = fs::read(d.join("s0.bin")).unwrap();
    fs::write(d.join("cut.bin"), &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&melo(&["inspect", "--snapshot", "cut.bin"], d)), 3);
    fs::write(d.join("junk.jsonl"), "{\"fact_id\":0}\n").unwrap();
    let out = melo(&["eval", "--snapshot", "s0.bin", "--stream", "junk.jsonl"], d);
    assert_eq!(code(&out), 3);
}

#[test]
fn defaults_print_a_loadable_config() {
    let dir = setup();
    let d = dir.path();
    let text = ok(&["--defaults"], d);
    assert!(text.contains("[editor]"));
    fs::write(d.join("defaults.toml"), &text).unwrap();
    let out = melo(&["gen", "--config", "defaults.toml", "--out", "full.jsonl"], d);
    assert_eq!(code(&out), 0);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = setup();
    let d = dir.path();
    let text = ok(
        &["sweep", "--config", "small.toml", "--axis", "radius", "--values", "0.5,1,2", "--out", "sw"],
        d,
    );
    assert_eq!(text.lines().count(), 3);
    let csv = fs::read_to_string(d.join("sw/sweep_radius.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("value,"));
}

#[test]
fn pretrain_is_byte_reproducible_and_empty_stream_is_a_no_op() {
    let dir = setup();
    let d = dir.path();
    ok(&["pretrain", "--config", "small.toml", "--out", "a.bin"], d);
    ok(&["pretrain", "--config", "small.toml", "--out", "b.bin"], d);
    let read = |f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read("a.bin"), read("b.bin"));
    fs::write(d.join("empty.jsonl"), "").unwrap();
    let log = ok(&["edit", "--snapshot", "a.bin", "--stream", "empty.jsonl", "--out", "c.bin"], d);
    assert!(log.is_empty());
    assert_eq!(read("a.bin"), read("c.bin"));
}
