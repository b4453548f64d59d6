use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use atomfrac::scenario::{parse_scenario_str, preset, PRESET_NAMES};

fn atomfrac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atomfrac"))
        .args(args)
        .env("ATOMFRAC_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn emit(name: &str, dir: &Path) -> String {
    let out = atomfrac(&["presets", "emit", name]);
    assert!(out.status.success());
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, &out.stdout).unwrap();
    path.to_str().unwrap().to_string()
}

const HOLD: &str = r#"
name = "hold"

[lattice]
kind = "chain"
atoms = 6
boundary = "both_ends"

[damage]
r1 = 1.2
r2 = 1.2

[loading]
kind = "hold"
amplitude = 0.0
angular_frequency = 1.0
angle = 0.0

[dynamics]
tau = 0.1
final_time = 1.0
nu = 0.1
dissipation = "l2"
"#;

#[test]
fn presets_list_and_emit() {
    let out = atomfrac(&["presets", "list"]);
    assert!(out.status.success());
    let names: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(String::from).collect();
    assert_eq!(names, PRESET_NAMES);
    for name in PRESET_NAMES {
        let out = atomfrac(&["presets", "emit", name]);
        assert!(out.status.success());
        let parsed = parse_scenario_str(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
        assert_eq!(parsed, preset(name).unwrap());
    }
    let out = atomfrac(&["presets", "emit", "no-such-preset"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
}

#[test]
fn hold_run_writes_one_row_per_atom_and_step() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hold.toml");
    fs::write(&path, HOLD).unwrap();
    let out_dir = dir.path().join("out");
    let out = atomfrac(&["run", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let traj = fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 11 * 6);
    let bonds = fs::read_to_string(out_dir.join("bonds.csv")).unwrap();
    assert_eq!(bonds.lines().next().unwrap(), "step,bond_id,atom_a,atom_b,kind,separation,memory,phi,active_branch");
    assert_eq!(bonds.lines().count(), 1 + 11 * 5);
    assert!(!out_dir.join("stress_strain.csv").exists());
    let verify: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("verify.json")).unwrap()).unwrap();
    assert_eq!(verify["all_green"], true);
    assert_eq!(verify["truncated"], false);
    assert_eq!(verify["report"]["steps"], 10);
    assert_eq!(verify["dirichlet_atoms"], serde_json::json!([0, 5]));
}

#[test]
fn paper_1d_breaks_one_bond_in_first_extension() {
    let dir = tempfile::tempdir().unwrap();
    let path = emit("paper-1d-l2", dir.path());
    let out_dir = dir.path().join("out");
    let out = atomfrac(&["run", &path, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bonds = fs::read_to_string(out_dir.join("bonds.csv")).unwrap();
    // Quarter period of sin(2 pi t) with tau = 1/60.
    let mut broken = std::collections::BTreeSet::new();
    for row in bonds.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        let step: usize = f[0].parse().unwrap();
        let phi: f64 = f[7].parse().unwrap();
        if step <= 15 && phi >= 1.0 {
            broken.insert(f[1].to_string());
        }
    }
    assert_eq!(broken.len(), 1, "{broken:?}");
    let verify: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("verify.json")).unwrap()).unwrap();
    assert_eq!(verify["all_green"], true);
    assert!(out_dir.join("stress_strain.csv").exists() == preset("paper-1d-l2").unwrap().stress_strain_enabled());
}

#[test]
fn identical_scenarios_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = emit("paper-1d-kv", dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(atomfrac(&["run", &path, "--out", a.to_str().unwrap()]).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_atomfrac"))
        .args(["run", &path, "--out", b.to_str().unwrap()])
        .env("ATOMFRAC_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    for f in ["trajectory.csv", "bonds.csv", "verify.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn nonconvergence_flushes_truncated_trace() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(emit("paper-1d-l2", dir.path())).unwrap();
    let text = text.replace("[solver]", "[solver]\nmax_iters = 1");
    let path = dir.path().join("starved.toml");
    fs::write(&path, text).unwrap();
    let out_dir = dir.path().join("out");
    let out = atomfrac(&["run", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let verify: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("verify.json")).unwrap()).unwrap();
    assert_eq!(verify["truncated"], true);
    assert_eq!(verify["all_green"], false);
    assert!(verify["error"].as_str().unwrap().len() > 0);
    assert!(fs::read_to_string(out_dir.join("trajectory.csv")).unwrap().lines().count() >= 2);
}

#[test]
fn bad_scenario_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, HOLD.replace("nu = 0.1", "nu = -1.0")).unwrap();
    let out = atomfrac(&["run", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dynamics.nu"));

    fs::write(&path, HOLD.replace("tau = 0.1\n", "")).unwrap();
    let out = atomfrac(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dynamics.tau"));
}

#[test]
fn tau_study_commands() {
    let dir = tempfile::tempdir().unwrap();
    let hold = dir.path().join("hold.toml");
    fs::write(&hold, HOLD).unwrap();

    let out = atomfrac(&["tau-study", hold.to_str().unwrap(), "--taus", "0.1"]);
    assert_eq!(out.status.code(), Some(1));

    let out_dir = dir.path().join("hold-study");
    let out = atomfrac(&["tau-study", hold.to_str().unwrap(), "--taus", "1/10,1/20,1/40", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("tau_study.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][2], "");
    for r in &rows[1..] {
        assert_eq!(r[2].parse::<f64>().unwrap(), 0.0);
    }

    // Elastic stretch: distances shrink with the step.
    let text = fs::read_to_string(emit("paper-1d-l2", dir.path())).unwrap().replace("amplitude = 2.0", "amplitude = 0.5");
    let elastic = dir.path().join("elastic.toml");
    fs::write(&elastic, text).unwrap();
    let out_dir = dir.path().join("elastic-study");
    let out = atomfrac(&["tau-study", elastic.to_str().unwrap(), "--taus", "1/30,1/60,1/120", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("tau_study.csv")).unwrap();
    let d: Vec<f64> = csv.lines().skip(2).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(d.len(), 2);
    assert!(d[1] < d[0], "{d:?}");
}
