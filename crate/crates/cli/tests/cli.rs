use std::path::Path;
use std::process::{Command, Output};

fn rawm(args: &[&str], env_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rawm"));
    cmd.args(args).env_remove("RAWM_OUTPUT_ROOT");
    if let Some(root) = env_root {
        cmd.env("RAWM_OUTPUT_ROOT", root);
    }
    cmd.output().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

const SMALL: &str = r#"
scenario = "pairwise"
n_seeds = 2
[generator]
n_datasets = 2
dim = 5
per_class = { train = 40, dev = 5, eval = 30 }
[network]
hidden = [6]
[strategy]
kind = "rawm"
epochs = 2
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn check_passes() {
    let out = rawm(&["check"], None);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 6);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn run_then_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let out = rawm(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("rawm/seed-0/report.json").exists());
    assert!(out_dir.join("rawm/seed-1/checkpoint.ckpt").exists());

    let table = rawm(&["table", "--out", out_dir.to_str().unwrap()], None);
    assert!(table.status.success());
    let text = String::from_utf8_lossy(&table.stdout);
    assert!(text.contains("rawm") && text.contains("T1"));
    let forgetting = rawm(&["table", "--forgetting"], Some(&out_dir));
    assert!(forgetting.status.success());
    assert!(out_dir.join("forgetting.csv").exists());
}

#[test]
fn single_seed_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let out = rawm(&["run", "--config", &cfg, "--seed", "4", "--out", a.to_str().unwrap()], None);
    assert!(out.status.success());
    let report = std::fs::read(a.join("rawm/seed-4/report.json")).unwrap();

    let b = dir.path().join("b");
    let ckpt = a.join("rawm/seed-4/checkpoint.ckpt");
    let out = rawm(
        &["run", "--config", &cfg, "--seed", "4", "--out", b.to_str().unwrap(), "--resume", ckpt.to_str().unwrap()],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(b.join("rawm/seed-4/report.json")).unwrap(), report);
}

#[test]
fn scenario_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = rawm(&["run", "--config", &cfg, "--seed", "0", "--scenario", "train_on_all"], Some(dir.path()));
    assert!(out.status.success());
    let report = std::fs::read_to_string(dir.path().join("rawm/seed-0/report.json")).unwrap();
    assert!(report.contains("\"train_on_all\""));
}

#[test]
fn config_errors_exit_one_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "n_seeds = 1\nbogus_key = 3\n");
    let out = rawm(&["run", "--config", &bad], Some(dir.path()));
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "parse");

    let out = rawm(&["run", "--config", "/nonexistent/exp.toml"], Some(dir.path()));
    assert_eq!(out.status.code(), Some(1));

    let bad_sweep = write_config(dir.path(), &format!("{SMALL}\n[[sweep]]\nfield = \"nope\"\nvalues = [1]\n"));
    let out = rawm(&["run", "--config", &bad_sweep], Some(dir.path()));
    assert_eq!(out.status.code(), Some(1));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("nope"));

    let out = rawm(&["run", "--config", &write_config(dir.path(), SMALL), "--scenario", "sideways"], Some(dir.path()));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = rawm(&["table", "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["message"].is_string());

    let cfg = write_config(dir.path(), SMALL);
    let garbage = dir.path().join("broken.ckpt");
    std::fs::write(&garbage, b"RAWMCKPT 1 00\n{}\n").unwrap();
    let out = rawm(
        &["run", "--config", &cfg, "--seed", "0", "--resume", garbage.to_str().unwrap()],
        Some(dir.path()),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_writes_one_csv_per_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = rawm(&["gen", "--config", &cfg, "--seed", "9", "--out", dir.path().join("csv").to_str().unwrap()], None);
    assert!(out.status.success());
    let files: Vec<_> = std::fs::read_dir(dir.path().join("csv")).unwrap().collect();
    assert_eq!(files.len(), 2);
    let text = std::fs::read_to_string(dir.path().join("csv/S.csv")).unwrap();
    assert!(text.starts_with("feature_0,feature_1,feature_2,feature_3,feature_4,label,split"));
    assert_eq!(text.lines().count(), 1 + 2 * (40 + 5 + 30));

    let ser = rawm(&["gen", "--ser", "--out", dir.path().join("ser").to_str().unwrap()], None);
    assert!(ser.status.success());
    assert_eq!(std::fs::read_dir(dir.path().join("ser")).unwrap().count(), 4);
}

#[test]
fn csv_stream_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let csv = dir.path().join("csv");
    assert!(rawm(&["gen", "--config", &cfg, "--out", csv.to_str().unwrap()], None).status.success());
    let text = r#"
csv = ["csv/S.csv", "csv/T1.csv"]
n_seeds = 1
[network]
hidden = [4]
[strategy]
kind = "owm"
epochs = 1
"#;
    let cfg = write_config(dir.path(), text);
    let out = rawm(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = rawm_core::harness::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(!cfg.runs().unwrap().is_empty());
        n += 1;
    }
    assert!(n >= 5);
}
