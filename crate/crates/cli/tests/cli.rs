//! End-to-end tests of the binary: exit codes, CSV artifacts, manifests and
//! byte-level reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run_config(dir: &Path, config: &str) -> Output {
    let config_path = dir.join("run.json");
    fs::write(&config_path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_mcbsde"))
        .arg(&config_path)
        .output()
        .expect("binary should run")
}

fn out_dir(dir: &Path) -> PathBuf {
    dir.join("out")
}

fn duality_config(out: &Path, seed: u64) -> String {
    format!(
        r#"{{
        "command": "verify-duality",
        "chain": {{ "rate_matrix": [[-1.0, 1.0], [1.0, -1.0]] }},
        "grid": {{ "t_end": 1.0, "n_steps": 100 }},
        "driver": {{
            "name": "linear-anticipated",
            "params": {{ "a": -0.2, "mu": 0.1, "b": [0.05, -0.05], "phi": 0.3 }}
        }},
        "delays": {{ "delta": {{ "form": "constant", "value": 0.25 }}, "k": 0.25 }},
        "terminal": {{ "xi": {{ "name": "constant", "value": 1.0 }} }},
        "mc": {{ "n_paths": 4000, "seed": {seed} }},
        "output": {{ "dir": {out:?} }}
    }}"#
    )
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let output = Command::new(env!("CARGO_BIN_EXE_mcbsde"))
        .arg("/no/such/config.json")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("/no/such/config.json"), "stderr: {stderr}");
}

#[test]
fn malformed_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let output = run_config(tmp.path(), "{ not json");
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn verify_duality_passes_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(tmp.path());
    let output = run_config(tmp.path(), &duality_config(&out, 7));
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let csv = fs::read_to_string(out.join("duality.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "setting,initial_state,solver_y,mc_estimate,std_error,abs_gap,within_3se"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2); // one row per initial state
    for row in rows {
        assert!(row.ends_with(",true"), "row fails the 3-se gate: {row}");
    }
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command: verify-duality"));
    assert!(manifest.contains("config_sha256: "));
    assert!(manifest.contains("seed: 7"));
    assert!(manifest.contains("library_version: "));
}

#[test]
fn trace_paths_dump_forward_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(tmp.path());
    let config = duality_config(&out, 7).replace(
        r#""n_paths": 4000"#,
        r#""n_paths": 500, "trace_paths": 2"#,
    );
    let output = run_config(tmp.path(), &config);
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    for p in 0..2 {
        let csv = fs::read_to_string(out.join(format!("sdde_path_{p}.csv"))).unwrap();
        assert!(csv.starts_with("time,xhat"));
        // history is zero, the start value is one
        assert!(csv.contains(",0.0000000000000000e0"));
        assert!(csv.contains(",1.0000000000000000e0"));
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp1 = tempfile::tempdir().unwrap();
    let tmp2 = tempfile::tempdir().unwrap();
    let out1 = out_dir(tmp1.path());
    let out2 = out_dir(tmp2.path());
    assert_eq!(
        run_config(tmp1.path(), &duality_config(&out1, 42)).status.code(),
        Some(0)
    );
    assert_eq!(
        run_config(tmp2.path(), &duality_config(&out2, 42)).status.code(),
        Some(0)
    );
    let csv1 = fs::read(out1.join("duality.csv")).unwrap();
    let csv2 = fs::read(out2.join("duality.csv")).unwrap();
    assert!(!csv1.is_empty());
    assert_eq!(csv1, csv2);
}

#[test]
fn simulate_chain_writes_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(tmp.path());
    let config = format!(
        r#"{{
        "command": "simulate-chain",
        "chain": {{ "rate_matrix": [[-2.0, 0.5], [2.0, -0.5]], "initial_state": 1 }},
        "grid": {{ "t_end": 1.0, "n_steps": 10 }},
        "mc": {{ "n_paths": 5, "seed": 3 }},
        "output": {{ "dir": {out:?} }}
    }}"#
    );
    let output = run_config(tmp.path(), &config);
    assert_eq!(output.status.code(), Some(0));
    let csv = fs::read_to_string(out.join("paths.csv")).unwrap();
    assert!(csv.starts_with("path,time,state"));
    // every path starts at the configured state, at time zero
    assert!(csv.lines().nth(1).unwrap().ends_with(",1"));
}

#[test]
fn solve_abse_writes_surface_and_iterations() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(tmp.path());
    let config = format!(
        r#"{{
        "command": "solve-abse",
        "chain": {{ "rate_matrix": [[-1.0, 1.0], [1.0, -1.0]] }},
        "grid": {{ "t_end": 1.0, "n_steps": 100 }},
        "driver": {{
            "name": "linear-anticipated",
            "params": {{ "a": -0.3, "mu": 0.2, "phi": 0.1 }}
        }},
        "delays": {{ "delta": {{ "form": "constant", "value": 0.25 }}, "k": 0.25 }},
        "terminal": {{ "xi": {{ "name": "state-values", "values": [1.0, -0.5] }} }},
        "output": {{ "dir": {out:?} }}
    }}"#
    );
    let output = run_config(tmp.path(), &config);
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let surface = fs::read_to_string(out.join("surface.csv")).unwrap();
    assert!(surface.starts_with("t,state,u,z_1,z_2"));
    // nodes over [0, T + K] for both states, plus the header
    assert_eq!(surface.lines().count(), 1 + 126 * 2);
    let iterations = fs::read_to_string(out.join("iterations.csv")).unwrap();
    assert!(iterations.lines().count() >= 3);
}

#[test]
fn non_monotone_comparison_instance_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(tmp.path());
    let config = format!(
        r#"{{
        "command": "check-comparison",
        "chain": {{ "rate_matrix": [[-1.0, 1.0], [1.0, -1.0]] }},
        "grid": {{ "t_end": 1.0, "n_steps": 100 }},
        "driver": {{
            "name": "linear-anticipated",
            "params": {{ "a": -0.2, "mu": -0.3, "phi": 0.0 }}
        }},
        "driver_2": {{
            "name": "linear-anticipated",
            "params": {{ "a": -0.2, "mu": -0.3, "phi": 0.5 }}
        }},
        "delays": {{ "delta": {{ "form": "constant", "value": 0.25 }}, "k": 0.25 }},
        "terminal": {{ "xi": {{ "name": "constant", "value": 0.0 }} }},
        "terminal_2": {{ "xi": {{ "name": "constant", "value": 0.5 }} }},
        "output": {{ "dir": {out:?} }}
    }}"#
    );
    let output = run_config(tmp.path(), &config);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("rejected"), "stderr: {stderr}");
}

#[test]
fn comparison_sweep_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(tmp.path());
    let config = format!(
        r#"{{
        "command": "check-comparison",
        "chain": {{ "rate_matrix": [[-1.0, 1.0], [1.0, -1.0]] }},
        "grid": {{ "t_end": 1.0, "n_steps": 80 }},
        "delays": {{ "delta": {{ "form": "constant", "value": 0.25 }}, "k": 0.25 }},
        "sweep": {{ "n_instances": 6, "seed": 11 }},
        "output": {{ "dir": {out:?} }}
    }}"#
    );
    let output = run_config(tmp.path(), &config);
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert!(csv.starts_with("instance_id,accepted,reason,max_violation,t,state"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn check_estimate_sweep_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(tmp.path());
    let config = format!(
        r#"{{
        "command": "check-estimate",
        "chain": {{ "rate_matrix": [[-1.0, 1.0], [1.0, -1.0]] }},
        "grid": {{ "t_end": 1.0, "n_steps": 80 }},
        "delays": {{ "delta": {{ "form": "constant", "value": 0.25 }}, "k": 0.25 }},
        "mc": {{ "n_paths": 2000, "seed": 5 }},
        "sweep": {{ "n_instances": 3, "seed": 21 }},
        "output": {{ "dir": {out:?} }}
    }}"#
    );
    let output = run_config(tmp.path(), &config);
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let csv = fs::read_to_string(out.join("estimate.csv")).unwrap();
    assert!(csv.starts_with("instance,lhs,rhs,c,holds"));
    for line in csv.lines().skip(1) {
        assert!(line.ends_with(",true"), "estimate row failed: {line}");
    }
}

#[test]
fn numerical_failure_exits_3_with_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(tmp.path());
    // a wildly non-contractive driver: the Picard iteration diverges
    let config = format!(
        r#"{{
        "command": "solve-abse",
        "chain": {{ "rate_matrix": [[-1.0, 1.0], [1.0, -1.0]] }},
        "grid": {{ "t_end": 1.0, "n_steps": 80 }},
        "driver": {{
            "name": "linear-anticipated",
            "params": {{ "a": 0.0, "mu": 40.0, "phi": 1.0 }}
        }},
        "delays": {{ "delta": {{ "form": "constant", "value": 0.25 }}, "k": 0.25 }},
        "terminal": {{ "xi": {{ "name": "constant", "value": 1.0 }} }},
        "output": {{ "dir": {out:?} }}
    }}"#
    );
    let output = run_config(tmp.path(), &config);
    assert_eq!(
        output.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(out.join("manifest.txt").exists());
}

#[test]
fn output_dir_env_override_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let ignored = out_dir(tmp.path());
    let actual = tmp.path().join("elsewhere");
    let config_path = tmp.path().join("run.json");
    fs::write(&config_path, duality_config(&ignored, 1)).unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_mcbsde"))
        .arg(&config_path)
        .env("MCBSDE_OUTPUT_DIR", &actual)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert!(actual.join("duality.csv").exists());
    assert!(!ignored.exists());
}
