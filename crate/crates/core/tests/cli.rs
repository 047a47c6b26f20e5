//! End-to-end checks of the `oes` binary and its output files.

use std::path::Path;
use std::process::Command;

use oes::cli::{self, Checkpoint, ControllerState, ExperimentConfig, Mode};

const SMALL: &str = r#"
mode = "oes"
seed = 3
workers = 1

[controller]
potential_hidden = [8, 8]
gain_hidden = [8]

[sampler]
batch_size = 4

[train]
iterations = 2
learning_rate = 1e-2
stop_window = 0

[eval]
n_trajectories = 3
write_trajectories = true

[landscape]
q_points = 11
p_points = 5
target_points = 3
"#;

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn oes() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_oes"));
    c.env("RUST_LOG", "warn");
    c
}

fn csv_rows(path: &Path) -> usize {
    csv::Reader::from_path(path).unwrap().records().count()
}

#[test]
fn train_eval_landscape_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let status = oes()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .args(["--tolerance", "1e-6:1e-6"])
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["checkpoint.json", "metrics.csv", "manifest.json", "params.bin"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_eq!(csv_rows(&out.join("metrics.csv")), 2);

    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    let ControllerState::Oes(c) = &ck.controller else { panic!("wrong controller kind") };
    assert_eq!(cli::load_binary_params(c, &out.join("params.bin")).unwrap(), c.params.0);
    let manifest: serde_json::Value = serde_json::from_reader(std::fs::File::open(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config_sha256"].as_str().unwrap(), ck.config.hash().unwrap());

    let status = oes().args(["eval", "--config"]).arg(&cfg_path).arg("--out").arg(&out).status().unwrap();
    assert!(status.success());
    let summary = out.join("eval/summary.csv");
    let text = std::fs::read_to_string(&summary).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(std::fs::read_dir(out.join("eval/trajectories")).unwrap().count(), 3);

    let status = oes().args(["landscape", "--config"]).arg(&cfg_path).arg("--out").arg(&out).status().unwrap();
    assert!(status.success());
    assert_eq!(csv_rows(&out.join("landscape/potential.csv")), 11);
    assert_eq!(csv_rows(&out.join("landscape/gain_t_0.000.csv")), 55);
    assert!(out.join("landscape/plot_landscape.py").exists());
}

#[test]
fn missing_config_exits_with_usage_code() {
    let status = oes().args(["train", "--config", "/nonexistent/oes.toml"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let status = oes().env_remove("OES_CONFIG").arg("train").status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn invalid_config_exits_with_runtime_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "mode = \"oes\"\nbogus_key = 1\n");
    let out = oes().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
}

#[test]
fn zero_iteration_training_keeps_zero_control() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    cfg.train.iterations = 0;
    cfg.output_dir = dir.path().join("zero");
    let art = cli::cmd_train(&cfg).unwrap();
    assert!(art.outcome.history.is_empty());
    assert_eq!(csv_rows(&art.metrics), 0);
    let ck = Checkpoint::load(&art.checkpoint).unwrap();
    let loaded = cli::LoadedPolicy::from_checkpoint(&ck).unwrap();
    let (policy, theta) = loaded.parts();
    assert_eq!(policy.control(theta, 0.5, 1.0, -2.0, 0.0).unwrap(), 0.0);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    cfg.train.iterations = 0;
    cfg.output_dir = dir.path().to_path_buf();
    cli::cmd_train(&cfg).unwrap();
    let ck = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();

    let mut other = cfg.clone();
    other.controller.potential_hidden = vec![16, 8];
    assert!(cli::check_compatible(&ck, &other).is_err());
    let mut pd = cfg.clone();
    pd.mode = Mode::Pdplus;
    assert!(cli::check_compatible(&ck, &pd).is_err());
    assert!(cli::check_compatible(&ck, &cfg).is_ok());

    let cfg_path = dir.path().join("other.toml");
    std::fs::write(&cfg_path, other.to_toml().unwrap()).unwrap();
    let status = oes().args(["eval", "--config"]).arg(&cfg_path).status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn pd_training_is_reproducible_and_worker_independent() {
    let dir = tempfile::tempdir().unwrap();
    let base = r#"
mode = "pdplus"
seed = 1
[sampler]
batch_size = 6
[train]
iterations = 3
learning_rate = 0.5
stop_window = 0
"#;
    let mut a = ExperimentConfig::from_toml(base).unwrap();
    a.output_dir = dir.path().join("a");
    let mut b = a.clone();
    b.output_dir = dir.path().join("b");
    b.workers = 2;
    let ra = cli::cmd_train(&a).unwrap();
    let rb = cli::cmd_train(&b).unwrap();
    assert_eq!(ra.outcome.theta, rb.outcome.theta);
    assert_eq!(std::fs::read_to_string(&ra.metrics).unwrap().lines().count(), 4);
    assert!(ra.outcome.theta.iter().all(|g| *g >= 0.0));
}

#[test]
fn pareto_writes_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    cfg.train.iterations = 1;
    cfg.pareto.gammas = vec![0.0, 1.0];
    cfg.pareto.seeds = vec![0, 1];
    cfg.pareto.batch_size = Some(2);
    cfg.pareto.eval_trajectories = 2;
    let s = cli::cmd_pareto(&cfg).unwrap();
    assert_eq!(s.rows.len(), 8);
    assert_eq!(csv_rows(&s.csv), 8);
    assert_eq!(s.dominance.len(), 2);
    let header = std::fs::read_to_string(&s.csv).unwrap();
    assert!(header.starts_with("method,gamma,seed,terminal,integral,status"));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.architecture().unwrap();
            n += 1;
        }
    }
    assert_eq!(n, 4);
}
