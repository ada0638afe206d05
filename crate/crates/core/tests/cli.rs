mod common;

use std::path::Path;
use std::process::Command;

use common::config_path;
use ncs_core::cli::{ExperimentConfig, EXIT_DIVERGENCE, EXIT_OK, EXIT_USAGE};

fn ncs_sim(args: &[&str], config: &Path, out: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_ncs-sim"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn bundled_configs_parse_and_round_trip() {
    for name in ["baseline.conf", "small_battery.conf"] {
        let cfg = ExperimentConfig::parse_file(&config_path(name)).unwrap();
        let again = ExperimentConfig::parse_str(&cfg.to_config_string()).unwrap();
        assert_eq!(cfg, again, "{name}");
        assert!(cfg.sim_config().is_ok());
    }
}

#[test]
fn every_output_starts_with_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = config_path("baseline.conf");
    for cmd in ["run", "sweep", "analyze", "regions"] {
        let code = ncs_sim(&[cmd, "--paths", "4", "--slots", "20", "--seed", "9"], &config, dir.path());
        assert_eq!(code, EXIT_OK, "{cmd}");
    }
    let mut cfg = ExperimentConfig::parse_file(&config).unwrap();
    cfg.paths = 4;
    cfg.slots = 20;
    cfg.seed = 9;
    let expected = format!("# config_sha256={} seed=9", cfg.sha256());
    for name in ["run.csv", "trace.csv", "sweep.csv", "stability_report.txt", "regions.csv"] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert_eq!(text.lines().next().unwrap(), expected, "{name}");
    }
    let run = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
    assert!(run.lines().nth(2).unwrap().starts_with("proposed,4,20,"));
    let sweep = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    // five theta values for six policies
    assert_eq!(sweep.lines().count(), 2 + 30);
}

#[test]
fn policy_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let code = ncs_sim(
        &["run", "--paths", "3", "--slots", "10", "--policy", "baseline2"],
        &config_path("baseline.conf"),
        dir.path(),
    );
    assert_eq!(code, EXIT_OK);
    let run = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
    assert!(run.lines().nth(2).unwrap().starts_with("baseline2,"));
}

#[test]
fn validation_and_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    let text = std::fs::read_to_string(config_path("baseline.conf")).unwrap().replace("eps = 0.05", "eps = 2");
    std::fs::write(&bad, text).unwrap();
    assert_eq!(ncs_sim(&["run"], &bad, dir.path()), EXIT_USAGE);
    assert_eq!(ncs_sim(&["run"], &dir.path().join("missing.conf"), dir.path()), EXIT_USAGE);
    assert_eq!(ncs_sim(&["run", "--policy", "nonsense"], &config_path("baseline.conf"), dir.path()), EXIT_USAGE);
    assert_eq!(ncs_sim(&["launch"], &config_path("baseline.conf"), dir.path()), EXIT_USAGE);
    assert!(!dir.path().join("run.csv").exists());
}

#[test]
fn divergence_above_threshold_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("silent.conf");
    let text = std::fs::read_to_string(config_path("baseline.conf"))
        .unwrap()
        .replace("name = proposed", "name = silent")
        .replace("divergence_warn_fraction = 0.05", "divergence_warn_fraction = 0.05\ndivergence_guard = 1e4");
    std::fs::write(&cfg_path, text).unwrap();
    assert_eq!(ncs_sim(&["run", "--paths", "5", "--slots", "200"], &cfg_path, dir.path()), EXIT_DIVERGENCE);
    let run = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
    assert!(run.lines().nth(2).unwrap().ends_with(",5"));
}

#[test]
fn seed_changes_results() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let config = config_path("baseline.conf");
    for (d, seed) in dirs.iter().zip(["1", "2"]) {
        assert_eq!(ncs_sim(&["run", "--paths", "4", "--slots", "30", "--seed", seed], &config, d.path()), EXIT_OK);
    }
    let a = std::fs::read(dirs[0].path().join("trace.csv")).unwrap();
    let b = std::fs::read(dirs[1].path().join("trace.csv")).unwrap();
    assert_ne!(a, b);
}
