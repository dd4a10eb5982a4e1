use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conformal_smpc::config::RunConfig;
use tempfile::TempDir;

fn csmpc(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csmpc"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn small_config(dir: &TempDir, edit: impl FnOnce(&mut RunConfig)) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.evaluation.n_test = 8;
    edit(&mut cfg);
    let path = dir.path().join("config.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn calibrate_reports_quantile_index() {
    let dir = TempDir::new().unwrap();
    let config = small_config(&dir, |_| {});
    let out = dir.path().join("out");
    let o = csmpc(&["calibrate"], &config, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("k           451"));
    assert!(out.join("region_state.json").exists());
    let summary = json(&out.join("calibration_state.json"));
    assert_eq!(summary["rank"], 451);
    assert_eq!(summary["n_cal"], 500);
    assert_eq!(summary["n_fit"], 250);
}

#[test]
fn calibrate_with_pac_shows_tightened_level() {
    let dir = TempDir::new().unwrap();
    let config = small_config(&dir, |c| c.calibration.pac_epsilon = Some(0.01));
    let out = dir.path().join("out");
    let o = csmpc(&["calibrate"], &config, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let expected = 0.1 - (-(0.01f64).ln() / (2.0 * 500.0)).sqrt();
    let got = json(&out.join("calibration_state.json"))["pac_violation"].as_f64().unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    assert!(stdout(&o).contains("ϑ̃"));
}

#[test]
fn missing_dataset_exits_3_without_outputs() {
    let dir = TempDir::new().unwrap();
    let config = small_config(&dir, |c| c.data.disturbance_path = Some(PathBuf::from("nowhere/w.csv")));
    let out = dir.path().join("out");
    for cmd in ["calibrate", "run", "evaluate"] {
        let o = csmpc(&[cmd], &config, &out);
        assert_eq!(o.status.code(), Some(3), "{cmd}: {}", stderr(&o));
        assert!(!out.exists(), "{cmd} left partial outputs");
    }
}

#[test]
fn dataset_file_is_used_when_given() {
    let dir = TempDir::new().unwrap();
    let cfg = RunConfig::default();
    let (w, _) = cfg.calibration_data(conformal_smpc::config::Mode::State).unwrap();
    conformal_smpc::data::save_dataset(&w, &dir.path().join("w.csv")).unwrap();
    let config = small_config(&dir, |c| c.data.disturbance_path = Some(PathBuf::from("w.csv")));
    let o = csmpc(&["calibrate"], &config, &dir.path().join("out"));
    assert!(o.status.success(), "{}", stderr(&o));
    // Same samples as the generator, so the same quantile.
    let generated = cfg.calibrate(conformal_smpc::config::Mode::State).unwrap();
    let got = json(&dir.path().join("out/calibration_state.json"))["qhat"].as_f64().unwrap();
    assert_eq!(got, generated.qhat);
}

#[test]
fn invalid_config_exits_2_and_names_field() {
    let dir = TempDir::new().unwrap();
    let config = small_config(&dir, |c| c.horizon.theta = 1.5);
    let o = csmpc(&["run"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("horizon.theta"), "{}", stderr(&o));
}

#[test]
fn too_few_calibration_samples_exits_4() {
    let dir = TempDir::new().unwrap();
    let config = small_config(&dir, |c| {
        c.data.n_cal = 5;
        c.data.m = 255;
    });
    let o = csmpc(&["calibrate"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn infeasible_start_exits_5_with_facets() {
    let dir = TempDir::new().unwrap();
    let config = small_config(&dir, |c| c.horizon.x0 = vec![1.5, 0.0]);
    let out = dir.path().join("out");
    let o = csmpc(&["run"], &config, &out);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("Z_0"), "{}", stderr(&o));
    assert!(!out.join("run_state").exists());
}

fn trajectory_rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap_or(f64::NAN)).collect())
        .collect()
}

#[test]
fn zero_noise_keeps_state_on_nominal() {
    let dir = TempDir::new().unwrap();
    let config = small_config(&dir, |_| {});
    for mode in ["state", "output"] {
        let out = dir.path().join(mode);
        let o = csmpc(&["run", "--zero-noise", "--mode", mode], &config, &out);
        assert!(o.status.success(), "{}", stderr(&o));
        // rollout, t, x1, x2, z1, z2, u1
        let rows = trajectory_rows(&out.join(format!("run_{mode}/trajectories.csv")));
        assert_eq!(rows.len(), 101);
        for r in rows {
            assert!((r[2] - r[4]).abs() < 1e-12 && (r[3] - r[5]).abs() < 1e-12, "{mode}: {r:?}");
        }
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn run_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let config = small_config(&dir, |_| {});
    let a = csmpc(&["run", "--seed", "5"], &config, &dir.path().join("a"));
    let b = csmpc(&["run", "--seed", "5"], &config, &dir.path().join("b"));
    assert!(a.status.success() && b.status.success());
    let (fa, fb) = (dir_bytes(&dir.path().join("a/run_state")), dir_bytes(&dir.path().join("b/run_state")));
    assert_eq!(fa.len(), 5);
    assert_eq!(fa, fb);
    let c = csmpc(&["run", "--seed", "6"], &config, &dir.path().join("c"));
    assert!(c.status.success());
    assert_ne!(fa, dir_bytes(&dir.path().join("c/run_state")));
}

#[test]
fn evaluate_with_and_without_baselines() {
    let dir = TempDir::new().unwrap();
    let config = small_config(&dir, |_| {});
    let with = dir.path().join("with");
    let o = csmpc(&["evaluate"], &config, &with);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = json(&with.join("evaluate_state/report.json"));
    assert_eq!(report["n_test"], 8);
    assert_eq!(report["baselines"]["chebyshev_level"].as_f64(), Some(2400.0));
    assert_eq!(report["baselines"]["comparison"]["rows"].as_array().unwrap().len(), 120);
    assert!(stdout(&o).contains("Chebyshev p̃"));
    for f in ["report.txt", "ellipses.csv", "scores.csv"] {
        assert!(with.join("evaluate_state").join(f).exists(), "{f}");
    }

    let without = dir.path().join("without");
    let o = csmpc(&["evaluate", "--no-baselines"], &config, &without);
    assert!(o.status.success());
    let report = json(&without.join("evaluate_state/report.json"));
    assert!(report.get("baselines").is_none());
    for key in ["coverage", "state_satisfaction", "input_satisfaction", "mean_cost", "seed"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    assert!(!stdout(&o).contains("Chebyshev"));
}

#[test]
fn compare_writes_region_and_policy_tables() {
    let dir = TempDir::new().unwrap();
    let config = small_config(&dir, |_| {});
    let out = dir.path().join("out");
    let o = csmpc(&["compare"], &config, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = json(&out.join("compare_state/compare.json"));
    assert_eq!(report["policies"]["n_test"], 8);
    assert!(report["policies"]["mean_open_loop"].as_f64().unwrap() > 0.0);
    let costs = std::fs::read_to_string(out.join("compare_state/policy_costs.csv")).unwrap();
    assert_eq!(costs.lines().count(), 9);
}

#[test]
fn stored_region_is_reused() {
    let dir = TempDir::new().unwrap();
    let config = small_config(&dir, |_| {});
    let out = dir.path().join("out");
    assert!(csmpc(&["calibrate"], &config, &out).status.success());
    let region = out.join("region_state.json");
    let before = std::fs::read(&region).unwrap();
    assert!(csmpc(&["run"], &config, &out).status.success());
    assert_eq!(std::fs::read(&region).unwrap(), before);
}

#[test]
fn usage_errors_exit_2() {
    let o = Command::new(env!("CARGO_BIN_EXE_csmpc")).arg("run").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_csmpc"))
        .args(["evaluate", "--config", "/nonexistent.toml"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
