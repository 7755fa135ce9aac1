use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use num_complex::Complex64;

use codesign::config::RunConfig;
use codesign::hilbert::ComplexMatrix;
use codesign_cli::{analyze_matrix, parse_matrix, sweep, RunOptions, SWEEP_HEADER};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn codesign(args: &[&str], envs: &[(&str, &str)]) -> (i32, String, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_codesign"));
    cmd.args(args).env("RAYON_NUM_THREADS", "1");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `population` column grouped by (initial, state).
fn populations(csv: &str) -> BTreeMap<(String, String), Vec<f64>> {
    let mut map: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t_ns,initial,state,population"));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 4, "{line}");
        map.entry((f[1].to_string(), f[2].to_string()))
            .or_default()
            .push(f[3].parse().unwrap());
    }
    map
}

#[test]
fn simulate_without_drive_keeps_dressed_populations() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("cr_demo.toml"))
        .unwrap()
        .replace("amplitude = 0.05", "amplitude = 0.0")
        .replace("basis = \"product\"", "basis = \"dressed\"");
    let cfg = dir.path().join("idle.toml");
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let (code, _, err) = codesign(&["simulate", "--config", path_str(&cfg), "--out", path_str(&out)], &[]);
    assert_eq!(code, 0, "{err}");
    let pops = populations(&fs::read_to_string(out.join("populations.csv")).unwrap());
    assert!(!pops.is_empty());
    for ((init, state), series) in &pops {
        let expected = if init == state { 1.0 } else { 0.0 };
        for p in series {
            assert!((p - expected).abs() < 1e-9, "{init} -> {state}: {p}");
        }
    }
}

#[test]
fn simulate_cross_resonance_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("cr_demo.toml");
    let (code, _, err) = codesign(&["simulate", "--config", path_str(&cfg), "--out", path_str(dir.path())], &[]);
    assert_eq!(code, 0, "{err}");
    let waves = fs::read_to_string(dir.path().join("waveforms.csv")).unwrap();
    assert!(waves.starts_with("t_ns,channel,envelope,quadrature,drive\n"));
    assert_eq!(waves.lines().count(), 402);
    let pops = populations(&fs::read_to_string(dir.path().join("populations.csv")).unwrap());
    for init in ["00", "01", "10", "11"] {
        let total: f64 = pops
            .iter()
            .filter(|((i, _), _)| i == init)
            .map(|(_, s)| s.last().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-9, "{init}: {total}");
    }
    let inv: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("invariants.json")).unwrap()).unwrap();
    assert_eq!(inv["gate"], "cr");
    let samples = inv["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 151);
    let d0 = samples[0]["pe_functional"].as_f64().unwrap();
    assert!((d0 - 2.0).abs() < 1e-9);
    assert!(samples.iter().any(|s| s["perfect_entangler"] == true));
}

#[test]
fn optimize_single_qubit_converges_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("fq_single_qubit.toml");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let (code, stdout, err) = codesign(&["optimize", "--config", path_str(&cfg), "--out", path_str(out)], &[]);
        assert_eq!(code, 0, "{err}");
        assert!(stdout.starts_with("goal "));
    }
    for name in ["trajectory.jsonl", "trajectory.csv", "run.json"] {
        let x = fs::read(a.join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.join(name)).unwrap(), "{name} differs between runs");
    }
    let csv = fs::read_to_string(a.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("iter,eps_I,eps_II,leakage,goal,chi,c1,c2,c3,restart\n"));
    let jsonl = fs::read_to_string(a.join("trajectory.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), csv.lines().count() - 1);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["converged"], true);
    assert_eq!(run["seed"], 11);
    assert!(run["best"]["goal"].as_f64().unwrap() < 0.1);
    assert!(run["probe"]["samples"].as_u64().unwrap() == 1000);
}

#[test]
fn seed_flag_changes_the_recorded_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("fq_single_qubit.toml");
    let (code, _, err) = codesign(
        &["optimize", "--config", path_str(&cfg), "--out", path_str(dir.path()), "--seed", "99"],
        &[("CODESIGN_OPTIMIZER__MAX_ITERATIONS", "3"), ("CODESIGN_THRESHOLD", "10.0")],
    );
    assert_eq!(code, 0, "{err}");
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 99);
    assert_eq!(run["config"]["optimizer"]["max_iterations"], 3);
}

#[test]
fn unconverged_run_exits_with_convergence_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("fq_algorithm.toml");
    let (code, _, err) = codesign(
        &["optimize", "--config", path_str(&cfg), "--out", path_str(dir.path())],
        &[("CODESIGN_OPTIMIZER__MAX_ITERATIONS", "1")],
    );
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("threshold"), "{err}");
    // outputs are still written
    assert!(dir.path().join("run.json").exists());
}

#[test]
fn unknown_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("fq_single_qubit.toml")).unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, text.replace("[optimizer]", "[optimizer]\nmax_iteratons = 5")).unwrap();
    let (code, _, err) = codesign(&["optimize", "--config", path_str(&cfg), "--out", path_str(dir.path())], &[]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("optimizer"), "{err}");
    assert!(err.contains("max_iteratons"), "{err}");
}

#[test]
fn missing_units_and_bad_override_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("fq_single_qubit.toml")).unwrap();
    let cfg = dir.path().join("nounits.toml");
    fs::write(&cfg, text.replace("frequency = \"GHz_2pi\"", "")).unwrap();
    let (code, _, err) = codesign(&["simulate", "--config", path_str(&cfg), "--out", path_str(dir.path())], &[]);
    assert_eq!(code, 2, "{err}");
    let good = configs().join("fq_single_qubit.toml");
    let (code, _, err) = codesign(
        &["simulate", "--config", path_str(&good), "--out", path_str(dir.path())],
        &[("CODESIGN_OPTIMIZER__MAX_ITERATIONS", "-4")],
    );
    assert_eq!(code, 2, "{err}");
}

#[test]
fn missing_config_file_is_a_runtime_error() {
    let (code, _, _) = codesign(&["simulate", "--config", "/nonexistent/x.toml"], &[]);
    assert_eq!(code, 1);
}

#[test]
fn analyze_named_matrices() {
    let (code, stdout, err) = codesign(&["analyze", path_str(&configs().join("matrices/cnot.json"))], &[]);
    assert_eq!(code, 0, "{err}");
    let r: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(r["nearest_class"], "CNOT/CPHASE");
    assert_eq!(r["perfect_entangler"], true);
    assert!(r["pe_functional"].as_f64().unwrap().abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let (code, _, err) = codesign(
        &["analyze", path_str(&configs().join("matrices/identity.json")), "--out", path_str(&report)],
        &[],
    );
    assert_eq!(code, 0, "{err}");
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["nearest_class"], "identity");
    assert_eq!(r["perfect_entangler"], false);
    assert!((r["pe_functional"].as_f64().unwrap() - 2.0).abs() < 1e-12);
}

fn rotation(theta: f64, axis: [f64; 3]) -> [[Complex64; 2]; 2] {
    let (c, s) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    let i = Complex64::i();
    [
        [Complex64::new(c, 0.0) - i * s * axis[2], -i * s * Complex64::new(axis[0], -axis[1])],
        [-i * s * Complex64::new(axis[0], axis[1]), Complex64::new(c, 0.0) + i * s * axis[2]],
    ]
}

#[test]
fn analyze_local_gate_is_identity_class() {
    let a = rotation(0.7, [0.6, 0.0, 0.8]);
    let b = rotation(2.3, [0.0, 1.0, 0.0]);
    let entries: Vec<Complex64> = (0..16).map(|k| a[k / 8][(k % 4) / 2] * b[(k / 4) % 2][k % 2]).collect();
    let u = ComplexMatrix::from_rows(4, &entries);
    let r = analyze_matrix(&u).unwrap();
    assert_eq!(r.nearest_class, "identity");
    assert!(r.class_distance < 1e-7);
    assert!(!r.perfect_entangler);
}

#[test]
fn analyze_rejects_non_unitary_and_malformed_input() {
    let scaled = "[[[2,0],[0,0],[0,0],[0,0]],[[0,0],[1,0],[0,0],[0,0]],[[0,0],[0,0],[1,0],[0,0]],[[0,0],[0,0],[0,0],[1,0]]]";
    let u = parse_matrix(scaled).unwrap();
    assert!(analyze_matrix(&u).is_err());
    assert!(parse_matrix("[[[1,0]]]").is_err());
}

fn cheap_options(out: &Path) -> RunOptions {
    RunOptions {
        config: configs().join("fq_single_qubit.toml"),
        out: out.to_path_buf(),
        seed: None,
        env: vec![("CODESIGN_OPTIMIZER__MAX_ITERATIONS".into(), "5".into())],
    }
}

#[test]
fn sweep_over_coupling_writes_runs_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep(&cheap_options(dir.path()), Some(("device.g".into(), vec![0.025, 0.05, 0.1]))).unwrap();
    assert_eq!(rows.len(), 3);
    for k in 0..3 {
        assert!(dir.path().join(format!("run_{k:03}/run.json")).exists());
    }
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert_eq!(lines.len(), 4);
    // |chi| grows with the bare coupling
    assert!(rows[0].chi_initial.abs() < rows[1].chi_initial.abs());
    assert!(rows[1].chi_initial.abs() < rows[2].chi_initial.abs());
}

#[test]
fn sweep_through_binary_and_empty_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("fq_single_qubit.toml");
    let env = [("CODESIGN_OPTIMIZER__MAX_ITERATIONS", "2"), ("CODESIGN_THRESHOLD", "10.0")];
    let (code, stdout, err) = codesign(
        &[
            "sweep", "--config", path_str(&cfg), "--out", path_str(dir.path()),
            "--parameter", "device.g", "--values", "0.03,0.06",
        ],
        &env,
    );
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("2 runs"));
    let empty = sweep(&cheap_options(dir.path()), Some(("device.g".into(), vec![])));
    assert_eq!(empty.unwrap_err().exit_code(), 2);
    let bad_path = sweep(&cheap_options(dir.path()), Some(("device.nope".into(), vec![0.1])));
    assert_eq!(bad_path.unwrap_err().exit_code(), 2);
    let (code, _, _) = codesign(
        &["sweep", "--config", path_str(&cfg), "--out", path_str(dir.path()), "--parameter", "device.g"],
        &env,
    );
    assert_eq!(code, 2);
}

#[test]
fn shipped_configs_round_trip() {
    let mut count = 0;
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let cfg = RunConfig::load(&path).unwrap();
        let via_toml = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        let via_json = RunConfig::from_json_str(&cfg.to_json_string().unwrap()).unwrap();
        assert_eq!(cfg, via_toml, "{}", path.display());
        assert_eq!(cfg, via_json, "{}", path.display());
        cfg.setup().unwrap();
        count += 1;
    }
    assert_eq!(count, 5);
}
