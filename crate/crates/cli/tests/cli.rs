//! CLI behavior tests: exit codes, caching, config validation, file formats.

use std::path::Path;
use std::process::{Command, Output};

fn volreg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volreg"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{context}: stdout={} stderr={}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn help_available_on_every_command() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [
        "build-sdf",
        "simulate-probes",
        "register",
        "run",
        "evaluate",
        "dump-archive",
    ] {
        let out = volreg(&[cmd, "--help"], dir.path());
        assert_exit(&out, 0, cmd);
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn missing_mesh_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = volreg(
        &["build-sdf", "--mesh", "nope.obj", "--res", "0.01", "--pad", "0.05"],
        dir.path(),
    );
    assert_exit(&out, 2, "missing mesh");
    assert!(String::from_utf8_lossy(&out.stderr).contains("mesh not found"));
}

#[test]
fn build_sdf_reports_cache_hit_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = volreg::shapes::icosphere(0.05, 1);
    mesh.save_obj(dir.path().join("ball.obj")).unwrap();
    let args = [
        "build-sdf",
        "--mesh",
        "ball.obj",
        "--res",
        "0.02",
        "--pad",
        "0.05",
    ];
    let first = volreg(&args, dir.path());
    assert_exit(&first, 0, "first build");
    assert!(String::from_utf8_lossy(&first.stdout).contains("wrote"));
    let second = volreg(&args, dir.path());
    assert_exit(&second, 0, "second build");
    assert!(String::from_utf8_lossy(&second.stdout).contains("cache hit"));
}

#[test]
fn unknown_scene_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = volreg(&["simulate-probes", "--scene", "teapot", "--out", "sim"], dir.path());
    assert_exit(&out, 2, "unknown scene");
}

#[test]
fn malformed_estimates_and_empty_estimates() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{not json").unwrap();
    let out = volreg(
        &["evaluate", "--scene", "box", "--estimates", "bad.json"],
        dir.path(),
    );
    assert_exit(&out, 2, "malformed estimates");

    std::fs::write(
        dir.path().join("empty.json"),
        r#"{"shortfall": false, "estimates": []}"#,
    )
    .unwrap();
    let out = volreg(
        &["evaluate", "--scene", "box", "--estimates", "empty.json"],
        dir.path(),
    );
    assert_exit(&out, 1, "empty estimate set");
    assert!(String::from_utf8_lossy(&out.stderr).contains("undefined"));
}

#[test]
fn run_config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "scene = \"box\"\nnot_a_key = 1\n",
    )
    .unwrap();
    let out = volreg(&["run", "--config", "run.toml"], dir.path());
    assert_exit(&out, 2, "unknown config key");
}

#[test]
fn run_config_validates_module_settings() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "scene = \"box\"\n[cost]\nepsilon = 0.05\n",
    )
    .unwrap();
    let out = volreg(&["run", "--config", "run.toml"], dir.path());
    assert_exit(&out, 2, "invalid epsilon");
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilon"));
}

#[test]
fn named_object_deltas_match_reference_table() {
    let cases = [
        ("real-drill", 0.001),
        ("real-mustard", 0.0003),
        ("sim-drill", 0.001),
        ("sim-mustard", 0.0003),
        ("sim-hammer", 0.001),
        ("sim-cracker", 0.0005),
        ("sim-spam", 0.0003),
        ("sim-clamp", 0.0007),
    ];
    for (name, want) in cases {
        assert_eq!(volreg::eval::named_delta(name), Some(want), "{name}");
    }
    assert_eq!(volreg::eval::named_delta("sim-teapot"), None);

    // the binary rejects unknown names as a usage error
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("est.json"), "{\"estimates\":[]}").unwrap();
    let out = volreg(
        &[
            "evaluate",
            "--scene",
            "box",
            "--estimates",
            "est.json",
            "--object",
            "sim-teapot",
        ],
        dir.path(),
    );
    assert_exit(&out, 2, "unknown object name");
}

#[test]
fn simulate_then_register_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sim = volreg(
        &["simulate-probes", "--scene", "sphere", "--seed", "2", "--out", "sim"],
        dir.path(),
    );
    assert_exit(&sim, 0, "simulate");
    assert!(dir.path().join("sim/obs_008.json").exists());
    assert!(dir.path().join("sim/scene.toml").exists());

    // registration against the written scene config (exercises mesh_path)
    let reg = volreg(
        &[
            "register",
            "--obs",
            "sim/obs_008.json",
            "--scene",
            "sim/scene.toml",
            "--optimizer",
            "sgd-only",
            "--seed",
            "4",
            "--out",
            "est.json",
            "--diagnostics",
            "diag.json",
            "--dump-archive",
            "archive.csv",
        ],
        dir.path(),
    );
    assert_exit(&reg, 0, "register");
    let est: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("est.json")).unwrap())
            .unwrap();
    // warm starts may collide in archive cells under sgd-only; the shortfall
    // flag records when fewer than the requested 30 cells were distinct
    let count = est["estimates"].as_array().unwrap().len();
    assert!((2..=30).contains(&count), "estimates {count}");
    assert_eq!(est["shortfall"].as_bool().unwrap(), count < 30);
    let diag: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("diag.json")).unwrap())
            .unwrap();
    assert!(diag["total"].as_f64().unwrap() >= 0.0);
    let csv = std::fs::read_to_string(dir.path().join("archive.csv")).unwrap();
    assert!(csv.starts_with("cell_x,cell_y,cost"));
    assert!(csv.lines().count() > 2);
}

#[test]
fn dump_archive_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let sim = volreg(
        &["simulate-probes", "--scene", "box", "--seed", "3", "--out", "sim"],
        dir.path(),
    );
    assert_exit(&sim, 0, "simulate");
    let out = volreg(
        &[
            "dump-archive",
            "--obs",
            "sim/obs_004.json",
            "--scene",
            "box",
            "--scene-seed",
            "3",
            "--optimizer",
            "sgd-only",
            "--seed",
            "1",
            "--dump-archive",
            "arch.csv",
        ],
        dir.path(),
    );
    assert_exit(&out, 0, "dump-archive");
    assert!(dir.path().join("arch.csv").exists());
}
