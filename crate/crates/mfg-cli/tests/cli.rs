//! End-to-end runs of the `mfg` binary on a scaled-down configuration.

use std::fs;
use std::process::Command;

fn tiny_config_toml() -> String {
    r#"
scenario = "bankrun"
seed = 11

[bankrun]
m_steps = 50

[grid]
n_time = 2
n_quant = 0
quantized_components = [0]
w0_sample = 512
min_atom_occupancy = 60

[fixed_point]
particles_per_atom = 300
max_iter = 2

[nplayer]
n_values = [8]
reps = 2
br_paths = 300
eval_paths = 100
inner_batch = 2
"#
    .to_string()
}

#[test]
fn pipeline_smoke_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    fs::write(&cfg_path, tiny_config_toml()).unwrap();
    let out = dir.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_mfg"))
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "--stage",
            "both",
            "--out",
            out.to_str().unwrap(),
            "--dump-paths",
        ])
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    for file in [
        "atoms.csv",
        "equilibrium_flow.csv",
        "history.csv",
        "bsde_solutions.json",
        "results.json",
        "paths.csv",
        "manifest.json",
        "timings.csv",
    ] {
        assert!(out.join(file).exists(), "{file} must be written");
    }
    let flow = fs::read_to_string(out.join("equilibrium_flow.csv")).unwrap();
    assert!(flow.starts_with("atom,time_index,time,one,h,clamp0,clamp1"));
}

#[test]
fn manifest_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    fs::write(&cfg_path, tiny_config_toml()).unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let run = |cfg: &str, out: &std::path::Path| {
        let s = Command::new(env!("CARGO_BIN_EXE_mfg"))
            .args([
                "--config",
                cfg,
                "--stage",
                "equilibrium",
                "--out",
                out.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(s.status.success(), "stderr: {}", String::from_utf8_lossy(&s.stderr));
    };
    run(cfg_path.to_str().unwrap(), &out_a);
    run(out_a.join("manifest.json").to_str().unwrap(), &out_b);
    for file in [
        "atoms.csv",
        "equilibrium_flow.csv",
        "history.csv",
        "bsde_solutions.json",
        "manifest.json",
    ] {
        assert_eq!(
            fs::read(out_a.join(file)).unwrap(),
            fs::read(out_b.join(file)).unwrap(),
            "{file} differs after manifest rerun"
        );
    }
}

#[test]
fn tolerance_below_noise_floor_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    let cfg = tiny_config_toml().replace(
        "[fixed_point]\nparticles_per_atom = 300\nmax_iter = 2",
        "[fixed_point]\nparticles_per_atom = 300\nmax_iter = 2\ntol = 1e-9",
    );
    fs::write(&cfg_path, cfg).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mfg"))
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "--stage",
            "equilibrium",
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "validation errors exit with 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("noise floor"),
        "stderr must explain the floor: {stderr}"
    );
}

#[test]
fn unknown_scenario_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_mfg"))
        .args(["--scenario", "nonsense"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
