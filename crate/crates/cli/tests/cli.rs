use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hnet_core::experiments::{ExperimentConfig, ExperimentId};

fn hnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hnet")).args(args).output().unwrap()
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn quick(id: ExperimentId) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(id);
    cfg.oracle_substeps = 50;
    cfg.dataset.size = cfg.dataset.size.min(20);
    cfg.training.hidden_widths = vec![6, 6];
    cfg.training.iterations = 10;
    cfg.training.decay_at = vec![];
    cfg.horizon = cfg.horizon.min(10);
    cfg.conservation_steps = cfg.conservation_steps.min(4);
    cfg
}

#[test]
fn preset_prints_a_loadable_config() {
    let out = hnet(&["preset", "kepler_predict"]);
    assert!(out.status.success());
    let cfg = ExperimentConfig::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, ExperimentConfig::preset(ExperimentId::KeplerPredict));
    assert!(!hnet(&["preset", "nope"]).status.success());
}

#[test]
fn overrides_take_effect() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &quick(ExperimentId::Table1));
    let out_dir = dir.path().join("run");
    let out = hnet(&["gen-data", "--config", &config, "--out", out_dir.to_str().unwrap(), "--seed", "42"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["train.csv", "train.json", "test.csv", "test.json", "manifest.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(out_dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 42"));
    assert!(manifest.contains("\"config_hash\""));
    assert!(manifest.contains("\"oracle_substeps\": 50"));
}

#[test]
fn every_run_command_writes_its_outputs() {
    let cases = [
        ("table1", ExperimentId::Table1, "table1.csv"),
        ("train", ExperimentId::Table1, "history_symplectic_euler.csv"),
        ("eval-loss", ExperimentId::Table1, "losses.csv"),
        ("predict", ExperimentId::PendulumPredict, "prediction_summary.csv"),
        ("ime-orders", ExperimentId::ImeOrders, "order_slopes.csv"),
        ("nt-existence", ExperimentId::NtExistence, "symmetry_defects.csv"),
    ];
    for (cmd, id, artifact) in cases {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), &quick(id));
        let out_dir = dir.path().join("run");
        let out = hnet(&[cmd, "--config", &config, "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join(artifact).exists(), "{cmd} -> {artifact}");
        assert!(out_dir.join("manifest.json").exists());
    }
}

#[test]
fn identical_runs_give_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &quick(ExperimentId::Table1));
    let mut tables = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        assert!(hnet(&["table1", "--config", &config, "--out", out_dir.to_str().unwrap()]).status.success());
        tables.push((
            fs::read(out_dir.join("table1.csv")).unwrap(),
            fs::read(out_dir.join("history_symplectic_euler.csv")).unwrap(),
        ));
    }
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn invalid_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(ExperimentId::Table1);
    cfg.dataset.size = 0;
    let config = write_config(dir.path(), &cfg);
    let out = hnet(&["gen-data", "--config", &config]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset size"));

    let config = write_config(dir.path(), &quick(ExperimentId::Table1));
    let out = hnet(&["predict", "--config", &config, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let out = hnet(&["table1", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!hnet(&["table1"]).status.success());
}

#[test]
fn shipped_configs_match_presets() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for id in ExperimentId::ALL {
        let cfg = ExperimentConfig::load(&configs.join(format!("{}.json", id.id()))).unwrap();
        assert_eq!(cfg, ExperimentConfig::preset(id), "{id}");
    }
}
