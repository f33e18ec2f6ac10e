use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
n_steps = 10
seeds = [0, 1]
log_level = "warn"

[scenario]
n_conditions = 4
base_samples_per_condition = 20
duplicated_conditions = [0]
duplication_factor = 30

[schedule]
timesteps = 100

[model]
cond_dim = 4
time_dim = 8
hidden = [16]

[train]
steps = 40
batch_size = 32
log_every = 20

[probe]
n_probe_seeds = 2
grid_timesteps = []
"#;

fn membasin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_membasin")).args(args).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn help_lists_subcommands() {
    let o = membasin(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["train", "sample", "probe", "sweep", "detect"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert_eq!(code(&membasin(&["sample", "--config", &cfg])), 2);
    assert_eq!(code(&membasin(&["train", "--config", &cfg, "--policy", "loud"])), 2);
    assert_eq!(code(&membasin(&["train", "--config", &cfg, "--seeds", "5-1"])), 2);
    assert_eq!(code(&membasin(&["frobnicate"])), 2);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    let o = membasin(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("configuration error"));

    let empty = write_config(dir.path(), "\n[sweep]\naxis = \"lambda\"\nvalues = []\n");
    assert_eq!(code(&membasin(&["sweep", "--config", &empty])), 2);
}

#[test]
fn missing_files_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = membasin(&["sample", "--config", &cfg, "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(code(&o), 4);
    assert_eq!(code(&membasin(&["train", "--config", "/nonexistent/run.toml"])), 4);
}

#[test]
fn train_sample_detect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let train_dir = dir.path().join("train");
    let o = membasin(&["train", "--config", &cfg, "--out", train_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = train_dir.join("model.ckpt");
    assert!(ckpt.exists());
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), ckpt.to_str().unwrap());

    let sample_dir = dir.path().join("sample");
    let o = membasin(&[
        "sample",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        sample_dir.to_str().unwrap(),
        "--seeds",
        "3-5",
        "--policy",
        "og",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(sample_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_samples"], 3 * 4);
    assert!(summary["policy"].as_str().unwrap().contains("opposite"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(sample_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "sample");
    assert!(manifest["checkpoint_hash"].is_string());
    let resolved = fs::read_to_string(sample_dir.join("config.toml")).unwrap();
    assert!(resolved.contains("seeds = [3, 4, 5]"));

    let o = membasin(&["detect", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", dir.path().join("detect").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("detect/detect.csv").exists());

    let o = membasin(&["probe", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", dir.path().join("probe").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("probe/probe.ndjson").exists());
}

#[test]
fn default_output_directory_uses_run_id() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("out_dir = {:?}\n{TINY}", runs.to_str().unwrap())).unwrap();
    let cfg = cfg.to_str().unwrap();
    let o = membasin(&["train", "--config", cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let entries: Vec<String> = fs::read_dir(&runs)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(entries.len(), 1);
    assert!(entries[0].starts_with("train-"));
    assert_eq!(entries[0].len(), "train-".len() + 12);
}
