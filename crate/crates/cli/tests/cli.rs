use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fedmcp");

const SMALL: &str = r#"
rounds = 1
seeds = [1]
checkpoints = false
[model]
hidden_size = 8
ffn_size = 16
num_blocks = 1
bottleneck = 2
[federation]
num_clients = 2
samples_per_client = 30
"#;

fn fedmcp(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("FEDMCP_OUTPUT_ROOT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("cfg.toml");
    // Top-level keys must precede the first table.
    let text = if extra.starts_with('[') {
        format!("{SMALL}\n{extra}")
    } else {
        format!("{extra}\n{SMALL}")
    };
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_report_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("report");
    let o = fedmcp(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "3,4"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "seed_3.csv", "seed_4.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("seed_3.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "seed,round,client_id,split,accuracy,loss_a,loss_b,loss_c,loss_total,wire_bytes_up,wire_bytes_down"
    );
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"], serde_json::json!([3, 4]));
}

#[test]
fn config_errors_exit_one_and_list_everything() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "local_epochs = 1\n[loss]\ngamma = 7.0\nmu = -2.0");
    let o = fedmcp(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("gamma") && err.contains("mu"), "{err}");

    let cfg = write_config(dir.path(), "no_such_key = 1");
    assert_eq!(fedmcp(&["params", "--config", &cfg], &[]).status.code(), Some(1));
    let missing = dir.path().join("missing.toml");
    let o = fedmcp(&["params", "--config", missing.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_two_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[optimizer]\nlearning_rate = 1.7e308");
    let out = dir.path().join("report");
    let o = fedmcp(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let diag = out.join("diagnostics_seed_1.json");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(diag).unwrap()).unwrap();
    assert!(!v["history"].as_array().unwrap().is_empty());
}

#[test]
fn output_root_env_relocates_relative_paths() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "output_dir = \"nested/run\"");
    let o = fedmcp(&["run", "--config", &cfg], &[("FEDMCP_OUTPUT_ROOT", root.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.path().join("nested/run/summary.json").exists());
}

#[test]
fn export_data_writes_tab_separated_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("data");
    let o = fedmcp(&["export-data", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(out.join("seed_1/client_1_contains_pattern/test.txt")).unwrap();
    assert_eq!(text.lines().count(), 6);
    for line in text.lines() {
        let (ids, label) = line.split_once('\t').unwrap();
        assert!(ids.split(' ').all(|t| t.parse::<usize>().is_ok()));
        assert!(label == "0" || label == "1");
    }
}

#[test]
fn params_reports_half_ratio() {
    let o = fedmcp(&["params"], &[]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("fedmcp communicated / trainable adapters = 0.5"), "{text}");
}

#[test]
fn ablate_emits_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("ablate");
    let o = fedmcp(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("| no_cl | cka | mean_pool | private_anchor |"), "{stdout}");
    assert!(out.join("matrix.csv").exists());
}
