use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_convprompt"))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "seed": 2,
        "backbone": { "image_size": 16, "seed": 2 },
        "stream": { "tasks": 2, "classes_per_task": 2, "samples_per_class": 6, "seed": 2 },
        "train": { "epochs": 1 }
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn gradcheck_passes_and_reports_every_group() {
    let o = bin().arg("gradcheck").output().unwrap();
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    for group in ["SE", "G", "pi", "PN", "classifier"] {
        assert!(text.lines().any(|l| l.starts_with(group)), "missing {group} in\n{text}");
    }
}

#[test]
fn corrupted_gradcheck_fails() {
    let o = bin().args(["gradcheck", "--corrupt"]).output().unwrap();
    assert!(!o.status.success());
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn similarity_prints_scores_and_budgets() {
    let birds = fixture("birds.json");
    let o = bin()
        .args(["similarity", "--attributes"])
        .arg(&birds)
        .args(["--mode", "attribute", "--j-max", "5"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("0.8600"), "{text}");
    let last: Vec<&str> = text.lines().last().unwrap().split_whitespace().collect();
    assert_eq!(last, ["2", "0.8600", "1"]);

    let o = bin()
        .args(["similarity", "--attributes"])
        .arg(fixture("fish_vehicles.json"))
        .args(["--j-max", "5"])
        .output()
        .unwrap();
    let last: Vec<String> = stdout(&o).lines().last().unwrap().split_whitespace().map(String::from).collect();
    assert_eq!(last, ["2", "0.7000", "2"]);

    let o = bin()
        .args(["similarity", "--attributes"])
        .arg(&birds)
        .args(["--mode", "class_label"])
        .output()
        .unwrap();
    assert!(o.status.success());
}

#[test]
fn run_writes_a_reloadable_record_independent_of_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut records = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("run{threads}.json"));
        let o = bin()
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .env("CONVPROMPT_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("A_T"));
        records.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(records[0], records[1]);
    let json: serde_json::Value = serde_json::from_slice(&records[0]).unwrap();
    assert_eq!(json["method"], "convprompt");
    assert_eq!(json["forward_passes_per_inference"], 1.0);
}

#[test]
fn run_accepts_seed_and_baseline_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("ft.json");
    let o = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "9", "--baseline", "seq_ft", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success());
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(json["method"], "seq_ft");
    assert_eq!(json["config"]["seed"], 9);
    assert_eq!(json["config"]["stream"]["seed"], 9);

    let o = bin().args(["run", "--config"]).arg(&cfg).args(["--baseline", "l2p"]).output().unwrap();
    assert!(!o.status.success());
}

#[test]
fn sweep_lists_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("sweep.json");
    let o = bin()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--param", "l_p", "--values", "1,2", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 3);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
    assert_eq!(json[1]["record"]["config"]["prompt"]["prompt_length"], 2);
}

#[test]
fn bad_inputs_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"lambda": 3}}"#).unwrap();
    let o = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda"));

    let o = bin().args(["run", "--config"]).arg(dir.path().join("missing.json")).output().unwrap();
    assert!(!o.status.success());

    let o = bin()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--param", "depth", "--values", "1"])
        .output()
        .unwrap();
    assert!(!o.status.success());
}
