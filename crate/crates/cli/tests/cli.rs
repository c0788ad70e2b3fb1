use std::path::Path;
use std::process::{Command, Output};

fn meanflow(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meanflow"))
        .args(args)
        .env("MEANFLOW_OUT", root)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 10] = [
    "--set",
    "train.T=20",
    "--set",
    "train.batch=32",
    "--set",
    "net.hidden=[16,16]",
    "--set",
    "eval.samples=64",
    "--set",
    "schedule.lambda_samples=10000",
];

fn train_small(root: &Path, name: &str) -> std::path::PathBuf {
    let mut args = vec!["train", "--set"];
    let set_name = format!("name=\"{name}\"");
    args.push(&set_name);
    args.extend(SMALL);
    let out = meanflow(root, &args);
    assert!(out.status.success(), "{}", stderr(&out));
    root.join(name)
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = meanflow(dir.path(), &["train", "no/such/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no/such/config.toml"), "{}", stderr(&out));
}

#[test]
fn override_reaches_the_manifest_and_metrics_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), "smoke");
    let manifest = std::fs::read_to_string(run.join("manifest.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(json["config"]["train"]["T"], 20);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() >= 2, "{metrics}");
}

#[test]
fn unknown_override_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = meanflow(dir.path(), &["train", "--set", "train.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_study_lists_the_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let out = meanflow(dir.path(), &["reproduce", "obs9"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for s in ["obs1", "obs2", "obs3", "ablation", "ksweep"] {
        assert!(err.contains(s), "{err}");
    }
}

#[test]
fn corrupted_checkpoint_exits_4_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, b"{\"format_version\": 1, \"net\": [").unwrap();
    let out = meanflow(dir.path(), &["eval", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("broken.json"), "{}", stderr(&out));
}

#[test]
fn eval_and_sample_from_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), "evalme");
    let ckpt = run.join("checkpoint.json");
    let csv = dir.path().join("eval.csv");
    let out = meanflow(
        dir.path(),
        &["eval", ckpt.to_str().unwrap(), "--nfe", "1,2", "--euler-nfe", "32", "--samples", "64", "--out", csv.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4, "{text}");
    assert!(stdout(&out).contains("noise baseline"));

    let stem = dir.path().join("pts");
    let out = meanflow(dir.path(), &["sample", ckpt.to_str().unwrap(), "-n", "50", "--out", stem.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
    let dump = meanflow::sample_eval::SampleDump::read(&stem.with_extension("bin")).unwrap();
    assert_eq!(dump.points.rows(), 50);
}

#[test]
fn eval_rejects_a_task_of_another_dimension_before_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let out = meanflow(dir.path(), &["eval", "missing.json", "--task", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_reference_lists_sections() {
    let dir = tempfile::tempdir().unwrap();
    let out = meanflow(dir.path(), &["config-reference"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for key in ["[train]", "\nT = ", "[schedule]", "k_sched = ", "[loss]", "adp_p = ", "[eval]", "samples = "] {
        assert!(text.contains(key), "missing {key:?}");
    }
    let parsed: toml::Table = text.parse().unwrap();
    assert!(parsed.contains_key("train"));
}
