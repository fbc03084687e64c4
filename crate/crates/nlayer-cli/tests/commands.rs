use std::path::Path;
use std::process::Command;

use nlayer_cli::config::ExperimentConfig;
use nlayer_cli::run::{cmd_assemble, cmd_profile, cmd_sweep, cmd_toda, RunOptions};
use nlayer_cli::{config_hash, exit_code};

fn opts(dir: &Path) -> RunOptions {
    RunOptions { out: dir.to_path_buf(), seed: 0, threads: 1 }
}

const PROFILE_P2: &str = "
[problem]
p = 2.0
";

#[test]
fn profile_constants_and_determinism() {
    let cfg = ExperimentConfig::parse(PROFILE_P2).unwrap();
    let hash = config_hash(PROFILE_P2);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    cmd_profile(&cfg, &hash, &opts(d1.path())).unwrap();
    cmd_profile(&cfg, &hash, &opts(d2.path())).unwrap();

    let table = std::fs::read_to_string(d1.path().join("profile_constants.csv")).unwrap();
    // Hash comment, header, then the p = 2 row with w(0) = 3 to eight digits.
    assert!(table.starts_with(&format!("# config {hash}\n")));
    let row = table.lines().nth(2).unwrap();
    let w0: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert!((w0 - 3.0).abs() < 1e-8, "w(0) = {w0}");

    // Byte-identical artifacts across reruns.
    for name in ["profile_constants.csv", "profile_identities.csv", "decay_constant_report.json"] {
        let a = std::fs::read(d1.path().join(name)).unwrap();
        let b = std::fs::read(d2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    // Manifest present and stamped with the same hash.
    let manifest = std::fs::read_to_string(d1.path().join("run_manifest.json")).unwrap();
    assert!(manifest.contains(&hash));
}

#[test]
fn small_exponent_allowed_alone_rejected_with_layers() {
    assert!(ExperimentConfig::parse("[problem]\np = 1.5\n").is_ok());
    let text = "
[problem]
p = 1.5

[layers]
n = 2
epsilon = [0.1, 0.05]
";
    let err = ExperimentConfig::parse(text).unwrap_err();
    assert_eq!(exit_code(&err), 2);
    assert!(err.to_string().contains("p > 3"), "{err}");

    let err = ExperimentConfig::parse("[problem]\np = 0.5\n").unwrap_err();
    assert_eq!(exit_code(&err), 2);
}

#[test]
fn epsilon_list_must_strictly_decrease() {
    let text = "
[problem]
p = 4.0

[layers]
n = 1
epsilon = [0.05, 0.05]
";
    let err = ExperimentConfig::parse(text).unwrap_err();
    assert!(err.to_string().contains("decreasing"), "{err}");
}

#[test]
fn assemble_without_curve_block_names_it() {
    let text = "
[problem]
p = 4.0

[layers]
n = 1
epsilon = [0.06]
";
    let cfg = ExperimentConfig::parse(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_assemble(&cfg, &config_hash(text), &opts(dir.path())).unwrap_err();
    assert_eq!(exit_code(&err), 2);
    assert!(err.to_string().contains("curve"), "{err}");
    // Nothing may be left behind.
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn toda_marks_resonant_rows_instead_of_failing() {
    // c2 = 5 makes the amplitude gap unsatisfiable at ε = 0.1 (consecutive
    // lattice points ε²k² are far closer than the demanded margin), so the
    // run must classify, not fail.
    let text = "
[problem]
p = 4.0
resolution = 48

[curve]
radius = 0.55
nodes = 64
delta0 = 0.3

[layers]
n = 2
epsilon = [0.1]

[toda]
c1 = 0.0
c2 = 5.0
";
    let cfg = ExperimentConfig::parse(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    cmd_toda(&cfg, &config_hash(text), &opts(dir.path())).unwrap();
    let table = std::fs::read_to_string(dir.path().join("resonance.csv")).unwrap();
    assert!(table.contains("resonant"), "{table}");
    let rho = std::fs::read_to_string(dir.path().join("interaction_distance.csv")).unwrap();
    assert!(rho.contains("resonant"));
}

#[test]
fn mixed_provenance_directory_rejected() {
    let cfg = ExperimentConfig::parse(PROFILE_P2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    cmd_profile(&cfg, &config_hash(PROFILE_P2), &opts(dir.path())).unwrap();
    // Same config again into the same directory is fine.
    cmd_profile(&cfg, &config_hash(PROFILE_P2), &opts(dir.path())).unwrap();
    // A different config must be refused.
    let other = "[problem]\np = 3.0\n";
    let cfg2 = ExperimentConfig::parse(other).unwrap();
    let err = cmd_profile(&cfg2, &config_hash(other), &opts(dir.path())).unwrap_err();
    assert_eq!(exit_code(&err), 2);
    assert!(err.to_string().contains("different configuration"), "{err}");
}

#[test]
fn sweep_on_disk_reports_slopes() {
    // Single interface on the near-critical circle of the unit disk; modest
    // grid keeps this test affordable while still producing 4 rows and a
    // positive decay slope.
    let text = "
[problem]
p = 4.0
resolution = 64

[curve]
radius = 0.549473
nodes = 128
delta0 = 0.42

[layers]
n = 1
epsilon = [0.09, 0.08, 0.07, 0.06]
delta = 0.13
";
    let cfg = ExperimentConfig::parse(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    cmd_sweep(&cfg, &config_hash(text), &opts(dir.path())).unwrap();
    let table = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 2 + 4, "{table}");
    let report = std::fs::read_to_string(dir.path().join("sweep.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(v["slope_order0"].as_f64().unwrap() > 0.3, "{report}");
    assert_eq!(v["rows"].as_u64().unwrap(), 4);
}

#[test]
fn binary_reports_validation_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    std::fs::write(&cfg_path, "[problem]\np = 0.5\n").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_nlayer"))
        .args(["profile", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
