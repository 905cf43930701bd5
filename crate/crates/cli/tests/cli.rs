use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json")
}

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geode-lab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn schema_lists_keys_and_exits_zero() {
    let o = lab(&["--print-schema"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["seed", "train.lambda", "eval.mca_decoding", "data.frames"] {
        assert!(text.contains(key), "schema lacks {key}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(lab(&[]).status.code(), Some(1));
    assert_eq!(lab(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn bad_overrides_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = lab(&["gen-data", "--out", out, "--set", "train.nope=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.nope"), "{}", stderr(&o));
    let o = lab(&["gen-data", "--out", out, "--set", "train.batch=many"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.batch"), "{}", stderr(&o));
    let o = lab(&["gen-data", "--out", out, "--set", "eval.mca_decoding=beam"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("eval.mca_decoding"), "{}", stderr(&o));
}

#[test]
fn gen_data_writes_dataset_manifest_and_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let o = lab(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "seed=1",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let data = tmp.path().join("data_n4");
    for f in ["train.manifest.json", "eval.manifest.json", "config.json"] {
        assert!(data.join(f).exists(), "missing {f}");
    }
    let snap: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(data.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["seed"], 1);
    assert_eq!(snap["data"]["frames"], 4);
    assert!(snap["train"]["lambda"].is_number());
}

#[test]
fn training_without_inputs_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lab(&["train-stage1", "--config", tiny().to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn report_aggregates_and_counts_warnings() {
    let tmp = tempfile::tempdir().unwrap();
    let line = r#"{"arm":"full","seed":0,"tasks":{"abs_dist":0.5},"counts":{"abs_dist":4},"na_mean":0.5,"mca_mean":0.0,"overall":0.5,"unparseable_rate":0.0,"samples":4}"#;
    let path = tmp.path().join("r.jsonl");
    std::fs::write(&path, format!("{line}\nnot json\n")).unwrap();
    let o = lab(&["report", path.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("warnings: 1"), "{stdout}");
    assert!(stdout.contains("full"));
    let csv = std::fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("full,1,0.500000,,"));
}
